use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{joint_loss, LossWeights, TrainingError};
use crate::ctc::min_frames;
use crate::model::{Model, ModelConfig};
use crate::numerics::{finite_diff_grad, relative_error, Tensor};

/// Magnitude below which gradients are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub worst_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub coordinates: usize,
    pub trials: usize,
}

/// Tiny-model config with `model_dim` and `num_blocks` set and everything
/// else scaled to match.
pub fn gradcheck_config(model_dim: usize, num_blocks: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        model_dim,
        ffn_dim: 2 * model_dim,
        num_heads: 2,
        num_blocks,
        conv_downsample: 2,
        feat_dim: 3,
        taee_dim: model_dim,
        taee_ffn: 2 * model_dim,
        taee_heads: 2,
        vocab_size,
        max_frames: 256,
        dropout: 0.0,
    }
}

/// Compares the backward pass of the full joint loss against central
/// differences over every parameter, on `trials` random models each paired
/// with a random feasible utterance of `frames` encoder frames and `tokens`
/// target tokens.
pub fn gradient_check(
    config: &ModelConfig,
    frames: usize,
    tokens: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainingError> {
    let weights = LossWeights {
        label_smoothing: 0.1,
        ..LossWeights::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        worst_rel_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
        trials,
    };
    for _ in 0..trials {
        let mut model = Model::new(config.clone(), rng.random())?;
        let raw = frames * config.conv_downsample;
        let features = Tensor::matrix(
            raw,
            config.feat_dim,
            (0..raw * config.feat_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let target = loop {
            let t: Vec<usize> = (0..tokens)
                .map(|_| rng.random_range(1..=config.vocab_size))
                .collect();
            if min_frames(&t) <= frames {
                break t;
            }
        };
        let analytic = joint_loss(&model, &features, &target, &weights, None)?
            .grads
            .flatten();
        let mut theta = model.params().flatten();
        let numeric = finite_diff_grad(
            |p| {
                model.params_mut().assign_flat(p);
                joint_loss(&model, &features, &target, &weights, None).map_or(f64::NAN, |l| l.total)
            },
            &mut theta,
            eps,
        )?;
        model.params_mut().assign_flat(&theta);

        let mut offsets = Vec::new();
        let mut acc = 0;
        for (_, name, t) in model.params().iter() {
            offsets.push((acc, name.to_string()));
            acc += t.len();
        }
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(*a, *n, GRADCHECK_FLOOR);
            if !(e <= report.worst_rel_error) {
                report.worst_rel_error = e;
                let owner = offsets
                    .iter()
                    .rev()
                    .find(|(start, _)| *start <= i)
                    .expect("offset 0 exists");
                report.worst_param = owner.1.clone();
            }
        }
        report.coordinates += analytic.len();
    }
    Ok(report)
}
