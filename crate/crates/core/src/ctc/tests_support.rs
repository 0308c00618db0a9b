//! Exhaustive path enumeration used as the reference in unit tests.

use rand::Rng;

use super::{collapse, LogProbLattice};
use crate::numerics::{log_sum_exp, Tensor};

pub fn uniform_lattice(frames: usize, vocab: usize) -> LogProbLattice {
    let v = -((vocab + 1) as f64).ln();
    LogProbLattice::new(Tensor::filled(&[frames, vocab + 1], v)).unwrap()
}

pub fn random_lattice<R: Rng>(rng: &mut R, frames: usize, vocab: usize) -> LogProbLattice {
    let logits: Vec<f64> = (0..frames * (vocab + 1))
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    LogProbLattice::from_logits(&Tensor::matrix(frames, vocab + 1, logits).unwrap()).unwrap()
}

/// `(log Σ, max)` of path log-probabilities over every label path that
/// collapses to `target`; both −∞ when none does.
pub fn brute_force(lattice: &LogProbLattice, target: &[usize]) -> (f64, f64) {
    let (frames, classes) = (lattice.frames(), lattice.vocab_size() + 1);
    let mut scores = Vec::new();
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            scores.push(lattice.path_score(&path));
        }
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    if scores.is_empty() {
        return (f64::NEG_INFINITY, f64::NEG_INFINITY);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (log_sum_exp(&scores).unwrap(), max)
}
