//! CTC alignment machinery: lattice and alignment types, the collapse map,
//! forward-backward loss, Viterbi forced alignment, greedy decoding,
//! confidence-thresholded alignment sampling and token segmentation.

mod loss;
mod sampling;
mod segments;
#[cfg(test)]
mod tests_support;
mod viterbi;

pub use loss::{ctc_loss, CtcLoss};
pub use sampling::{esa_sample, greedy_decode, GreedyOutput};
pub use segments::{segment_boundaries, SegmentBoundaries};
pub use viterbi::viterbi_align;

use thiserror::Error;

use crate::numerics::{kernels, NumericsError, Tensor};

/// Label id reserved for the CTC blank.
pub const BLANK: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target of {tokens} tokens needs at least {required} frames, lattice has {frames}")]
    Infeasible {
        frames: usize,
        tokens: usize,
        required: usize,
    },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target id {id} outside 1..={vocab}")]
    InvalidLabel { id: usize, vocab: usize },
    #[error("lattice row {row} is not a log-distribution (logsumexp {lse})")]
    NotNormalized { row: usize, lse: f64 },
    #[error("alignment collapses to an empty token sequence")]
    EmptyAlignment,
    #[error("numerical failure: {0}")]
    Numerics(#[from] NumericsError),
}

/// Frame-level log-posteriors, `[T, V+1]` with column 0 the blank.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    values: Tensor,
}

impl LogProbLattice {
    /// Wraps log-probabilities, checking each row normalizes within 1e-8.
    pub fn new(values: Tensor) -> Result<Self, CtcError> {
        if values.rank() != 2 || values.cols() < 2 {
            return Err(NumericsError::Shape(format!(
                "lattice needs [T, V+1] with V >= 1, got {:?}",
                values.dims()
            ))
            .into());
        }
        for t in 0..values.rows() {
            let lse = kernels::log_sum_exp(values.row(t))?;
            if !((lse).abs() <= 1e-8) {
                return Err(CtcError::NotNormalized { row: t, lse });
            }
        }
        Ok(LogProbLattice { values })
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(logits: &Tensor) -> Result<Self, CtcError> {
        Self::new(kernels::log_softmax_rows(logits)?)
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    /// Number of real tokens `V` (the blank excluded).
    pub fn vocab_size(&self) -> usize {
        self.values.cols() - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn get(&self, t: usize, label: usize) -> f64 {
        self.values.get(t, label)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Log-probability of a frame-level label path.
    pub fn path_score(&self, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(t, &l)| self.get(t, l))
            .sum()
    }
}

/// A frame-level label path and its log-probability under its lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub labels: Vec<usize>,
    pub score: f64,
}

impl Alignment {
    pub fn new(labels: Vec<usize>, score: f64) -> Self {
        Alignment { labels, score }
    }

    pub fn scored(labels: Vec<usize>, lattice: &LogProbLattice) -> Self {
        let score = lattice.path_score(&labels);
        Alignment { labels, score }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn collapse(&self) -> Vec<usize> {
        collapse(&self.labels)
    }
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Fewest frames any alignment of `target` can have: one per token plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub(crate) fn check_target(lattice: &LogProbLattice, target: &[usize]) -> Result<(), CtcError> {
    if target.is_empty() {
        return Err(CtcError::EmptyTarget);
    }
    let vocab = lattice.vocab_size();
    if let Some(&id) = target.iter().find(|&&id| id == BLANK || id > vocab) {
        return Err(CtcError::InvalidLabel { id, vocab });
    }
    let required = min_frames(target);
    if lattice.frames() < required {
        return Err(CtcError::Infeasible {
            frames: lattice.frames(),
            tokens: target.len(),
            required,
        });
    }
    Ok(())
}

/// Target interleaved with blanks: `∅ y₁ ∅ y₂ … y_U ∅`.
pub(crate) fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered directly from `s − 2`.
#[inline]
pub(crate) fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 1;
    const B: usize = 2;

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[BLANK, A, A, BLANK, B]), vec![A, B]);
        assert_eq!(collapse(&[A, BLANK, A]), vec![A, A]);
        assert_eq!(collapse(&[BLANK, BLANK, BLANK]), Vec::<usize>::new());
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[A, A]), 3);
        assert_eq!(min_frames(&[A, B, B, A]), 5);
    }

    #[test]
    fn lattice_rejects_unnormalized_rows() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            LogProbLattice::new(t),
            Err(CtcError::NotNormalized { row: 0, .. })
        ));
    }
}
