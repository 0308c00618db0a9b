use super::{can_skip, check_target, extended_labels, Alignment, CtcError, LogProbLattice};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Best-scoring alignment among those collapsing to `target`.
///
/// Ties resolve toward the path that enters later trellis states as early as
/// possible, so tokens are emitted at their earliest tied frame.
pub fn viterbi_align(lattice: &LogProbLattice, target: &[usize]) -> Result<Alignment, CtcError> {
    check_target(lattice, target)?;
    let ext = extended_labels(target);
    let (frames, states) = (lattice.frames(), ext.len());

    let mut score = vec![NEG_INF; frames * states];
    let mut back = vec![0u8; frames * states];
    score[0] = lattice.get(0, ext[0]);
    score[1] = lattice.get(0, ext[1]);
    for t in 1..frames {
        let row = lattice.row(t);
        for s in 0..states {
            let prev = (t - 1) * states;
            // visit the most advanced predecessor (staying put) first; the
            // strict comparison keeps it on ties
            let mut best = score[prev + s];
            let mut step = 0u8;
            if s >= 1 && score[prev + s - 1] > best {
                best = score[prev + s - 1];
                step = 1;
            }
            if can_skip(&ext, s) && score[prev + s - 2] > best {
                best = score[prev + s - 2];
                step = 2;
            }
            if best > NEG_INF {
                score[t * states + s] = best + row[ext[s]];
                back[t * states + s] = step;
            }
        }
    }

    let last = (frames - 1) * states;
    let (end_blank, end_token) = (score[last + states - 1], score[last + states - 2]);
    let mut s = if end_blank >= end_token {
        states - 1
    } else {
        states - 2
    };
    let best = score[last + s];
    let mut labels = vec![0; frames];
    for t in (0..frames).rev() {
        labels[t] = ext[s];
        if t > 0 {
            s -= back[t * states + s] as usize;
        }
    }
    Ok(Alignment::new(labels, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::tests_support::{brute_force, random_lattice, uniform_lattice};
    use crate::ctc::{collapse, BLANK};
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_tie_prefers_earliest_emission() {
        let lat = uniform_lattice(2, 1);
        let a = viterbi_align(&lat, &[1]).unwrap();
        assert_eq!(a.labels, vec![1, BLANK]);
        assert!((a.score - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn three_frame_tie_emits_first() {
        let lat = uniform_lattice(3, 1);
        let a = viterbi_align(&lat, &[1]).unwrap();
        assert_eq!(a.labels, vec![1, BLANK, BLANK]);
        let lat = uniform_lattice(4, 2);
        let a = viterbi_align(&lat, &[1, 2]).unwrap();
        assert_eq!(a.labels, vec![1, 2, BLANK, BLANK]);
    }

    #[test]
    fn degenerate_lattice_returns_its_path() {
        // prob 1 on (a, ∅, b)
        let z = f64::NEG_INFINITY;
        let t = Tensor::from_rows(&[vec![z, 0.0, z], vec![0.0, z, z], vec![z, z, 0.0]]).unwrap();
        let lat = LogProbLattice::new(t).unwrap();
        let a = viterbi_align(&lat, &[1, 2]).unwrap();
        assert_eq!(a.labels, vec![1, BLANK, 2]);
        assert_eq!(a.score, 0.0);
    }

    #[test]
    fn matches_enumerated_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let frames = rng.random_range(1..=6);
            let vocab = rng.random_range(1..=3);
            let lat = random_lattice(&mut rng, frames, vocab);
            let u = rng.random_range(1..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..=vocab)).collect();
            if let Ok(a) = viterbi_align(&lat, &target) {
                let (_, max) = brute_force(&lat, &target);
                assert!((a.score - max).abs() < 1e-9);
                assert_eq!(collapse(&a.labels), target);
                assert!((lat.path_score(&a.labels) - a.score).abs() < 1e-12);
            }
        }
    }
}
