use super::{can_skip, check_target, extended_labels, CtcError, LogProbLattice};
use crate::numerics::kernels::log_add;
use crate::numerics::Tensor;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Negative log-likelihood of a target and its gradient wrt the logits that
/// produced the lattice (`softmax − posterior occupancy`).
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub nll: f64,
    pub grad: Tensor,
}

/// CTC loss by the log-domain forward-backward recursion over the `2U+1`
/// extended-label trellis.
pub fn ctc_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<CtcLoss, CtcError> {
    check_target(lattice, target)?;
    let ext = extended_labels(target);
    let (frames, states) = (lattice.frames(), ext.len());

    let mut alpha = vec![NEG_INF; frames * states];
    alpha[0] = lattice.get(0, ext[0]);
    alpha[1] = lattice.get(0, ext[1]);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let row = lattice.row(t);
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + row[ext[s]]
            };
        }
    }

    let mut beta = vec![NEG_INF; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = lattice.get(frames - 1, ext[states - 1]);
    beta[last + states - 2] = lattice.get(frames - 1, ext[states - 2]);
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let next = &next[..states];
        let row = lattice.row(t);
        for s in 0..states {
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && can_skip(&ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + row[ext[s]]
            };
        }
    }

    let log_z = log_add(alpha[last + states - 1], alpha[last + states - 2]);
    if log_z == NEG_INF {
        // feasible lengths but every valid path has zero probability
        return Ok(CtcLoss {
            nll: f64::INFINITY,
            grad: Tensor::zeros(lattice.values().dims()),
        });
    }

    let classes = lattice.vocab_size() + 1;
    let mut grad = Tensor::zeros(&[frames, classes]);
    for t in 0..frames {
        let row = lattice.row(t);
        let g = grad.row_mut(t);
        for (k, lp) in row.iter().enumerate() {
            g[k] = lp.exp();
        }
        for s in 0..states {
            let a = alpha[t * states + s];
            let b = beta[t * states + s];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            g[ext[s]] -= (a + b - row[ext[s]] - log_z).exp();
        }
    }
    Ok(CtcLoss { nll: -log_z, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::tests_support::{brute_force, random_lattice, uniform_lattice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_two_frame_single_token() {
        let lat = uniform_lattice(2, 1);
        let out = ctc_loss(&lat, &[1]).unwrap();
        // paths (a,∅), (∅,a), (a,a): 3/4 of the mass
        assert!((out.nll - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((out.nll - 0.287_682_072_451_781).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_reported() {
        let lat = uniform_lattice(1, 1);
        assert!(matches!(
            ctc_loss(&lat, &[1, 1]),
            Err(CtcError::Infeasible {
                frames: 1,
                required: 3,
                ..
            })
        ));
        assert!(matches!(ctc_loss(&lat, &[]), Err(CtcError::EmptyTarget)));
        assert!(matches!(
            ctc_loss(&lat, &[2]),
            Err(CtcError::InvalidLabel { id: 2, .. })
        ));
    }

    #[test]
    fn matches_enumeration_and_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let frames = rng.random_range(1..=6);
            let vocab = rng.random_range(1..=3);
            let lat = random_lattice(&mut rng, frames, vocab);
            let u = rng.random_range(1..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..=vocab)).collect();
            match ctc_loss(&lat, &target) {
                Ok(out) => {
                    let (sum, _) = brute_force(&lat, &target);
                    assert!((out.nll + sum).abs() < 1e-9, "{} vs {}", out.nll, -sum);
                    for t in 0..frames {
                        let s: f64 = out.grad.row(t).iter().sum();
                        assert!(s.abs() < 1e-10);
                    }
                }
                Err(CtcError::Infeasible { .. }) => {
                    assert!(brute_force(&lat, &target).0 == f64::NEG_INFINITY);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (frames, vocab) = (5, 3);
        let logits: Vec<f64> = (0..frames * (vocab + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let target = [2, 2, 1];
        let eval = |z: &[f64]| {
            let t = Tensor::matrix(frames, vocab + 1, z.to_vec()).unwrap();
            ctc_loss(&LogProbLattice::from_logits(&t).unwrap(), &target)
                .unwrap()
                .nll
        };
        let mut theta = logits.clone();
        let fd = crate::numerics::finite_diff_grad(eval, &mut theta, 1e-5).unwrap();
        let t = Tensor::matrix(frames, vocab + 1, logits).unwrap();
        let out = ctc_loss(&LogProbLattice::from_logits(&t).unwrap(), &target).unwrap();
        for (a, b) in out.grad.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
