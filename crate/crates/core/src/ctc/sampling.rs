use rand::Rng;

use super::{collapse, Alignment, LogProbLattice};

/// Per-frame argmax path and its confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyOutput {
    pub alignment: Alignment,
    /// `exp(max log-prob)` per frame.
    pub confidence: Vec<f64>,
}

/// Frame-wise argmax; ties go to the lowest label id.
pub fn greedy_decode(lattice: &LogProbLattice) -> GreedyOutput {
    let mut labels = Vec::with_capacity(lattice.frames());
    let mut confidence = Vec::with_capacity(lattice.frames());
    let mut score = 0.0;
    for t in 0..lattice.frames() {
        let row = lattice.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        labels.push(best);
        confidence.push(row[best].exp());
        score += row[best];
    }
    GreedyOutput {
        alignment: Alignment::new(labels, score),
        confidence,
    }
}

/// Error-based sampled alignments.
///
/// Frames whose greedy confidence is at least `threshold` keep the argmax
/// label; the others draw a label from the frame's full posterior (blank
/// included). A sample that collapses to nothing is redrawn once, then
/// replaced by the greedy path.
pub fn esa_sample<R: Rng + ?Sized>(
    lattice: &LogProbLattice,
    threshold: f64,
    count: usize,
    rng: &mut R,
) -> Vec<Alignment> {
    let greedy = greedy_decode(lattice);
    let uncertain: Vec<usize> = greedy
        .confidence
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < threshold)
        .map(|(t, _)| t)
        .collect();

    let draw = |rng: &mut R| {
        let mut labels = greedy.alignment.labels.clone();
        for &t in &uncertain {
            labels[t] = sample_row(lattice.row(t), rng);
        }
        labels
    };

    (0..count)
        .map(|_| {
            if uncertain.is_empty() {
                return greedy.alignment.clone();
            }
            let mut labels = draw(rng);
            if collapse(&labels).is_empty() {
                labels = draw(rng);
            }
            if collapse(&labels).is_empty() {
                return greedy.alignment.clone();
            }
            Alignment::scored(labels, lattice)
        })
        .collect()
}

fn sample_row<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = log_probs.iter().map(|v| v.exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, v) in log_probs.iter().enumerate() {
        let p = v.exp();
        if p <= 0.0 {
            continue;
        }
        last = k;
        if u < p {
            return k;
        }
        u -= p;
    }
    last
}
