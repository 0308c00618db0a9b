//! Tab-separated manifests: id, feature path (relative to the manifest),
//! raw frame count, duration in seconds, transcript.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_feat, tokenize, DataError, Vocab};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_path: PathBuf,
    pub frames: usize,
    pub duration: f64,
    pub transcript: String,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.feature_path.display(),
            self.frames,
            self.duration,
            self.transcript
        )
        .expect("string write");
        s
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[raw_frames, feat_dim]`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    /// Gold frame labels at the encoder rate (synthetic data only).
    pub alignment: Option<Vec<usize>>,
    pub duration: f64,
}

/// Parses records without touching feature files.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!(
                "expected 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let frames = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad frame count {:?}", fields[2])))?;
        let duration: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad duration {:?}", fields[3])))?;
        if !(duration.is_finite() && duration > 0.0) {
            return Err(err(format!("duration must be positive, got {duration}")));
        }
        out.push(ManifestRecord {
            id: fields[0].to_string(),
            feature_path: PathBuf::from(fields[1]),
            frames,
            duration,
            transcript: fields[4].trim().to_string(),
        });
    }
    Ok(out)
}

/// Loads and shape-checks every referenced feature file, in manifest order.
/// Gold alignments are attached when `alignments.tsv` sits next to the
/// manifest.
pub fn load_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<Utterance>, DataError> {
    let records = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let align_path = base.join("alignments.tsv");
    let alignments = if align_path.exists() {
        Some(load_alignments(&align_path)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let features = read_feat(&base.join(&rec.feature_path))?;
        let integrity = |message: String| DataError::Integrity {
            id: rec.id.clone(),
            message,
        };
        if features.rows() != rec.frames {
            return Err(integrity(format!(
                "manifest says {} frames, feature file header says {}",
                rec.frames,
                features.rows()
            )));
        }
        let tokens = tokenize(&rec.transcript, vocab).ids;
        if tokens.is_empty() {
            return Err(integrity("empty transcript".into()));
        }
        let alignment = alignments
            .as_ref()
            .and_then(|a| a.iter().find(|(id, _)| *id == rec.id))
            .map(|(_, labels)| labels.clone());
        if let Some(a) = &alignment {
            if crate::ctc::collapse(a) != tokens {
                return Err(integrity(
                    "gold alignment does not collapse to the transcript".into(),
                ));
            }
        }
        out.push(Utterance {
            id: rec.id,
            features,
            tokens,
            alignment,
            duration: rec.duration,
        });
    }
    Ok(out)
}

/// `id<TAB>space-separated label ids`, one line per utterance.
pub fn load_alignments(path: &Path) -> Result<Vec<(String, Vec<usize>)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab".into()))?;
        let labels = rest
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err(format!("bad label {s:?}"))))
            .collect::<Result<Vec<usize>, _>>()?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}
