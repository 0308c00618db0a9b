//! Binary checkpoints.
//!
//! Layout: `UECN`, `u32` version, `u32` tensor count, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` rank, `u64` dims and row-major `f64`
//! values; a trailing CRC32 covers everything after the magic. All integers
//! and floats are little-endian.
//!
//! Parameters are stored under their own names, optimizer moments under
//! `optim.m.<name>` / `optim.v.<name>`, the model config as scalars under
//! `config.model.<field>` and loop counters under `meta.<field>`.

use std::path::Path;

use serde_json::{Map, Number, Value};

use super::{Adam, TrainingError};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UECN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training-loop counters carried across resumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMeta {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub best_wer: f64,
    pub bad_epochs: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            step: 0,
            epoch: 0,
            best_wer: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Option<Adam>,
    pub meta: TrainMeta,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainingError + '_ {
    move |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), TrainingError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| TrainingError::Domain(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(t.rank() as u8);
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).map_err(io(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainingError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainingError::Checkpoint {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainingError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainingError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, TrainingError> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    let bad = |offset, message: String| TrainingError::Checkpoint { offset, message };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(0, "bad magic".into()));
    }
    if bytes.len() < 16 {
        return Err(bad(bytes.len(), "file too short".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[4..body_end]);
    if stored != actual {
        return Err(bad(
            body_end,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| bad(at + 2, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload_at = r.pos;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| bad(payload_at, "size overflow".into()))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| bad(payload_at, e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != body_end {
        return Err(bad(
            r.pos,
            format!("{} unexpected trailing bytes", body_end - r.pos),
        ));
    }
    Ok(out)
}

fn config_tensors(config: &ModelConfig) -> Vec<(String, Tensor)> {
    let Value::Object(map) = serde_json::to_value(config).expect("config serializes") else {
        unreachable!("config is a struct")
    };
    map.into_iter()
        .map(|(k, v)| {
            (
                format!("config.model.{k}"),
                Tensor::scalar(v.as_f64().expect("numeric field")),
            )
        })
        .collect()
}

fn config_from(tensors: &[(String, Tensor)]) -> Result<ModelConfig, TrainingError> {
    let mut map = Map::new();
    for (name, t) in tensors {
        if let Some(field) = name.strip_prefix("config.model.") {
            let v = t.item();
            let num = if v.fract() == 0.0 && v >= 0.0 {
                Number::from(v as u64)
            } else {
                Number::from_f64(v)
                    .ok_or_else(|| TrainingError::Domain(format!("{name} is not finite")))?
            };
            map.insert(field.to_string(), Value::Number(num));
        }
    }
    serde_json::from_value(Value::Object(map))
        .map_err(|e| TrainingError::Domain(format!("checkpoint model config: {e}")))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optim: Option<&Adam>,
    meta: &TrainMeta,
) -> Result<(), TrainingError> {
    let mut tensors = config_tensors(model.config());
    for (_, name, t) in model.params().iter() {
        tensors.push((name.to_string(), t.clone()));
    }
    if let Some(adam) = optim {
        for (id, name, _) in model.params().iter() {
            tensors.push((format!("optim.m.{name}"), adam.m[id.0].clone()));
            tensors.push((format!("optim.v.{name}"), adam.v[id.0].clone()));
        }
        tensors.push(("optim.t".into(), Tensor::scalar(adam.t as f64)));
    }
    tensors.push(("meta.step".into(), Tensor::scalar(meta.step as f64)));
    tensors.push(("meta.epoch".into(), Tensor::scalar(meta.epoch as f64)));
    tensors.push(("meta.best_wer".into(), Tensor::scalar(meta.best_wer)));
    tensors.push((
        "meta.bad_epochs".into(),
        Tensor::scalar(meta.bad_epochs as f64),
    ));
    write_checkpoint(path, &tensors)
}

fn assign(target: &mut Tensor, name: &str, value: &Tensor) -> Result<(), TrainingError> {
    if target.dims() != value.dims() {
        return Err(TrainingError::DimensionMismatch {
            tensor: name.to_string(),
            expected: target.dims().to_vec(),
            found: value.dims().to_vec(),
        });
    }
    target.data_mut().copy_from_slice(value.data());
    Ok(())
}

fn lookup<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor, TrainingError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| TrainingError::Domain(format!("checkpoint has no tensor {name}")))
}

/// Copies every parameter of `model` from the checkpoint, checking shapes.
pub fn load_params_into(
    tensors: &[(String, Tensor)],
    model: &mut Model,
) -> Result<(), TrainingError> {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let value = lookup(tensors, &name)?;
        assign(model.params_mut().get_mut(id), &name, value)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainingError> {
    let tensors = read_checkpoint(path)?;
    let config = config_from(&tensors)?;
    let mut model = Model::new(config, 0)?;
    load_params_into(&tensors, &mut model)?;
    let optim = if tensors.iter().any(|(n, _)| n == "optim.t") {
        let mut adam = Adam::new(&model);
        for (id, name, _) in model.params().iter() {
            assign(
                &mut adam.m[id.0],
                name,
                lookup(&tensors, &format!("optim.m.{name}"))?,
            )?;
            assign(
                &mut adam.v[id.0],
                name,
                lookup(&tensors, &format!("optim.v.{name}"))?,
            )?;
        }
        adam.t = lookup(&tensors, "optim.t")?.item() as u64;
        Some(adam)
    } else {
        None
    };
    let scalar = |name: &str| lookup(&tensors, name).map(Tensor::item);
    let meta = TrainMeta {
        step: scalar("meta.step")? as u64,
        epoch: scalar("meta.epoch")? as u64,
        best_wer: scalar("meta.best_wer")?,
        bad_epochs: scalar("meta.bad_epochs")? as u64,
    };
    Ok(Checkpoint { model, optim, meta })
}
