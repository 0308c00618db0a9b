//! Joint two-pass objective, optimizer and schedule, checkpoints and the
//! training loop.

mod checkpoint;
mod fit;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{
    load_checkpoint, load_params_into, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use fit::{EpochRecord, FitOutcome, StepLosses, StopReason, Trainer};
pub use gradcheck::{gradcheck_config, gradient_check, GradCheckReport, GRADCHECK_FLOOR};
pub use loss::{joint_loss, JointLoss};
pub use optim::{noam_lr, Adam, ADAM_BETAS, ADAM_EPS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::CtcError;
use crate::decoding::DecodeError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{0}")]
    Domain(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    #[error("tensor {tensor}: checkpoint has dims {found:?}, model expects {expected:?}")]
    DimensionMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(
        "training diverged at step {step} (non-finite {what}); parameters hold the last good state"
    )]
    Diverged { step: u64, what: String },
    #[error("no feasible training utterances")]
    NoData,
}

/// Weights of the CTC terms relative to the token cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            label_smoothing: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.lambda1) && ok(self.lambda2)) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainingError::Config(format!(
                "invalid loss weights {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub peak_lr_encoder: f64,
    pub peak_lr_new_modules: f64,
    /// Raw input frames per batch (8000 frames at 10 ms is 80 s of audio).
    pub batch_frame_budget: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 15_000,
            peak_lr_encoder: 5e-5,
            peak_lr_new_modules: 1e-3,
            batch_frame_budget: 8000,
            max_epochs: 30,
            early_stop_patience: 10,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.warmup_steps < 1 {
            return Err(TrainingError::Config(
                "warmup_steps must be at least 1".into(),
            ));
        }
        if self.batch_frame_budget == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(TrainingError::Config(
                "batch_frame_budget, max_epochs and early_stop_patience must be positive".into(),
            ));
        }
        let lr_ok = |v: f64| v > 0.0 && v.is_finite();
        if !lr_ok(self.peak_lr_encoder)
            || !lr_ok(self.peak_lr_new_modules)
            || !lr_ok(self.clip_norm)
        {
            return Err(TrainingError::Config(
                "learning rates and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}
