//! Vocabulary, feature files, manifests and the synthetic task generator.

mod feat;
mod manifest;
mod synth;
mod vocab;

pub use feat::{read_feat, write_feat, FEAT_MAGIC};
pub use manifest::{load_alignments, load_manifest, read_manifest, ManifestRecord, Utterance};
pub use synth::{synth_generate, write_dataset, SynthDataset, SynthTaskSpec, FRAME_SHIFT_SECS};
pub use vocab::{detokenize, load_vocab, tokenize, Tokenized, Vocab, BLANK_TOKEN, UNK_TOKEN};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: malformed feature file at byte {offset}: {message}")]
    Feature {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("utterance {id}: {message}")]
    Integrity { id: String, message: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
