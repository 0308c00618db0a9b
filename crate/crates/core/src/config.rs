//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn message(&self) -> String {
        self.0.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    UInt,
    Float,
    Bool,
    Text,
}

impl Kind {
    pub fn describe(self) -> &'static str {
        match self {
            Kind::UInt => "unsigned integer",
            Kind::Float => "number",
            Kind::Bool => "boolean (true/false)",
            Kind::Text => "string",
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        kind,
        default,
        doc,
    }
}

/// Every accepted key with its default. `--help` is rendered from this table.
pub const SCHEMA: &[KeySpec] = &[
    k("model.model_dim", Kind::UInt, "64", "encoder width d"),
    k(
        "model.ffn_dim",
        Kind::UInt,
        "256",
        "encoder feed-forward width",
    ),
    k(
        "model.num_heads",
        Kind::UInt,
        "4",
        "encoder attention heads",
    ),
    k("model.num_blocks", Kind::UInt, "4", "encoder blocks"),
    k(
        "model.conv_downsample",
        Kind::UInt,
        "4",
        "frontend frame-rate reduction",
    ),
    k("model.feat_dim", Kind::UInt, "16", "input feature width"),
    k(
        "model.taee_dim",
        Kind::UInt,
        "64",
        "token-embedding extractor width",
    ),
    k(
        "model.taee_ffn",
        Kind::UInt,
        "256",
        "extractor feed-forward width",
    ),
    k(
        "model.taee_heads",
        Kind::UInt,
        "4",
        "extractor attention heads",
    ),
    k(
        "model.vocab_size",
        Kind::UInt,
        "21",
        "tokens excluding blank",
    ),
    k(
        "model.max_frames",
        Kind::UInt,
        "4096",
        "longest encoder sequence",
    ),
    k(
        "model.dropout",
        Kind::Float,
        "0.1",
        "dropout while training",
    ),
    k(
        "train.warmup_steps",
        Kind::UInt,
        "15000",
        "noam warmup steps",
    ),
    k(
        "train.peak_lr_encoder",
        Kind::Float,
        "0.00005",
        "peak lr, frontend and encoder",
    ),
    k(
        "train.peak_lr_new_modules",
        Kind::Float,
        "0.001",
        "peak lr, extractor, embeddings, heads",
    ),
    k(
        "train.batch_frame_budget",
        Kind::UInt,
        "8000",
        "raw frames per batch",
    ),
    k("train.max_epochs", Kind::UInt, "30", "epoch limit"),
    k(
        "train.early_stop_patience",
        Kind::UInt,
        "10",
        "epochs without valid improvement",
    ),
    k(
        "train.clip_norm",
        Kind::Float,
        "5",
        "global gradient norm clip",
    ),
    k(
        "train.seed",
        Kind::UInt,
        "0",
        "init, batching and dropout seed",
    ),
    k("train.lambda1", Kind::Float, "1", "first-pass CTC weight"),
    k("train.lambda2", Kind::Float, "1", "second-pass CTC weight"),
    k(
        "train.label_smoothing",
        Kind::Float,
        "0",
        "token cross-entropy smoothing",
    ),
    k(
        "train.final_unienc_eval",
        Kind::Bool,
        "true",
        "iterative-decode valid WER after training",
    ),
    k(
        "decode.schedule",
        Kind::Text,
        "25,2",
        "samples per iteration",
    ),
    k(
        "decode.threshold",
        Kind::Float,
        "0.9",
        "confidence threshold",
    ),
    k("decode.seed", Kind::UInt, "0", "sampling seed"),
    k(
        "data.train_manifest",
        Kind::Text,
        "train/manifest.tsv",
        "relative to --data",
    ),
    k(
        "data.valid_manifest",
        Kind::Text,
        "valid/manifest.tsv",
        "relative to --data",
    ),
    k(
        "data.vocab",
        Kind::Text,
        "train/vocab.txt",
        "relative to --data",
    ),
];

pub fn schema_entry(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub schedule: String,
    pub threshold: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_manifest: String,
    pub valid_manifest: String,
    pub vocab: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub final_unienc_eval: bool,
    pub decode: DecodeSettings,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            final_unienc_eval: true,
            decode: DecodeSettings {
                schedule: "25,2".into(),
                threshold: 0.9,
                seed: 0,
            },
            data: DataSettings {
                train_manifest: "train/manifest.tsv".into(),
                valid_manifest: "valid/manifest.tsv".into(),
                vocab: "train/vocab.txt".into(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(spec: &KeySpec, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| {
        ConfigError(format!(
            "config key {} expects a {}, got {value:?}",
            spec.key,
            spec.kind.describe()
        ))
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let spec =
            schema_entry(key).ok_or_else(|| ConfigError(format!("unknown config key {key}")))?;
        let value = value.trim();
        if value.is_empty() {
            return Err(ConfigError(format!(
                "missing value for config key {key} (expected {})",
                spec.kind.describe()
            )));
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let w = &mut self.weights;
        match key {
            "model.model_dim" => m.model_dim = parse(spec, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(spec, value)?,
            "model.num_heads" => m.num_heads = parse(spec, value)?,
            "model.num_blocks" => m.num_blocks = parse(spec, value)?,
            "model.conv_downsample" => m.conv_downsample = parse(spec, value)?,
            "model.feat_dim" => m.feat_dim = parse(spec, value)?,
            "model.taee_dim" => m.taee_dim = parse(spec, value)?,
            "model.taee_ffn" => m.taee_ffn = parse(spec, value)?,
            "model.taee_heads" => m.taee_heads = parse(spec, value)?,
            "model.vocab_size" => m.vocab_size = parse(spec, value)?,
            "model.max_frames" => m.max_frames = parse(spec, value)?,
            "model.dropout" => m.dropout = parse(spec, value)?,
            "train.warmup_steps" => t.warmup_steps = parse(spec, value)?,
            "train.peak_lr_encoder" => t.peak_lr_encoder = parse(spec, value)?,
            "train.peak_lr_new_modules" => t.peak_lr_new_modules = parse(spec, value)?,
            "train.batch_frame_budget" => t.batch_frame_budget = parse(spec, value)?,
            "train.max_epochs" => t.max_epochs = parse(spec, value)?,
            "train.early_stop_patience" => t.early_stop_patience = parse(spec, value)?,
            "train.clip_norm" => t.clip_norm = parse(spec, value)?,
            "train.seed" => t.seed = parse(spec, value)?,
            "train.lambda1" => w.lambda1 = parse(spec, value)?,
            "train.lambda2" => w.lambda2 = parse(spec, value)?,
            "train.label_smoothing" => w.label_smoothing = parse(spec, value)?,
            "train.final_unienc_eval" => self.final_unienc_eval = parse(spec, value)?,
            "decode.schedule" => self.decode.schedule = value.to_string(),
            "decode.threshold" => self.decode.threshold = parse(spec, value)?,
            "decode.seed" => self.decode.seed = parse(spec, value)?,
            "data.train_manifest" => self.data.train_manifest = value.to_string(),
            "data.valid_manifest" => self.data.valid_manifest = value.to_string(),
            "data.vocab" => self.data.vocab = value.to_string(),
            _ => unreachable!("every schema key is handled"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, w) = (&self.model, &self.train, &self.weights);
        Some(match key {
            "model.model_dim" => m.model_dim.to_string(),
            "model.ffn_dim" => m.ffn_dim.to_string(),
            "model.num_heads" => m.num_heads.to_string(),
            "model.num_blocks" => m.num_blocks.to_string(),
            "model.conv_downsample" => m.conv_downsample.to_string(),
            "model.feat_dim" => m.feat_dim.to_string(),
            "model.taee_dim" => m.taee_dim.to_string(),
            "model.taee_ffn" => m.taee_ffn.to_string(),
            "model.taee_heads" => m.taee_heads.to_string(),
            "model.vocab_size" => m.vocab_size.to_string(),
            "model.max_frames" => m.max_frames.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "train.warmup_steps" => t.warmup_steps.to_string(),
            "train.peak_lr_encoder" => t.peak_lr_encoder.to_string(),
            "train.peak_lr_new_modules" => t.peak_lr_new_modules.to_string(),
            "train.batch_frame_budget" => t.batch_frame_budget.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.early_stop_patience" => t.early_stop_patience.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.lambda1" => w.lambda1.to_string(),
            "train.lambda2" => w.lambda2.to_string(),
            "train.label_smoothing" => w.label_smoothing.to_string(),
            "train.final_unienc_eval" => self.final_unienc_eval.to_string(),
            "decode.schedule" => self.decode.schedule.clone(),
            "decode.threshold" => self.decode.threshold.to_string(),
            "decode.seed" => self.decode.seed.to_string(),
            "data.train_manifest" => self.data.train_manifest.clone(),
            "data.valid_manifest" => self.data.valid_manifest.clone(),
            "data.vocab" => self.data.vocab.clone(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| ConfigError(format!("{origin}:{}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects key=value, got {o:?}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Every key in schema order, loadable by [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        for spec in SCHEMA {
            writeln!(
                s,
                "{} = {}",
                spec.key,
                self.get(spec.key).expect("schema key")
            )
            .expect("string write");
        }
        s
    }
}

/// Help text listing every key with its type and default.
pub fn schema_help() -> String {
    let mut s = String::from("Config keys (file lines or --set key=value):\n");
    for spec in SCHEMA {
        writeln!(
            s,
            "  {:<28} {:<8} default {:<20} {}",
            spec.key,
            short(spec.kind),
            spec.default,
            spec.doc
        )
        .expect("string write");
    }
    s
}

fn short(kind: Kind) -> &'static str {
    match kind {
        Kind::UInt => "uint",
        Kind::Float => "float",
        Kind::Bool => "bool",
        Kind::Text => "string",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_defaults_match_struct_defaults() {
        let cfg = RunConfig::default();
        for spec in SCHEMA {
            let mut parsed = RunConfig::default();
            parsed.set(spec.key, spec.default).unwrap();
            assert_eq!(parsed, cfg, "{}", spec.key);
            assert!(cfg.get(spec.key).is_some(), "{}", spec.key);
        }
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.model_dim", "32").unwrap();
        cfg.set("train.peak_lr_encoder", "0.002").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), "rendered").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_empty_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("model.width", "3").unwrap_err().message();
        assert!(e.contains("unknown config key model.width"));
        let e = cfg
            .apply_text("model.num_blocks =\n", "x.conf")
            .unwrap_err()
            .message();
        assert!(
            e.contains("model.num_blocks") && e.contains("unsigned integer"),
            "{e}"
        );
        let e = cfg.set("train.lambda1", "heavy").unwrap_err().message();
        assert!(e.contains("train.lambda1") && e.contains("number"), "{e}");
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "# toy\ntrain.max_epochs = 5\n").unwrap();
        let cfg = RunConfig::load(&p, &["train.max_epochs=7".into()]).unwrap();
        assert_eq!(cfg.train.max_epochs, 7);
    }
}
