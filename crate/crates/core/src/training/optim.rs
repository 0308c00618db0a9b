use super::TrainingError;
use crate::model::{Model, ParamGroup};
use crate::numerics::{Gradients, Tensor};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.98);
pub const ADAM_EPS: f64 = 1e-9;

/// `peak · min(step / warmup, sqrt(warmup / step))`, which peaks at
/// `step == warmup`.
pub fn noam_lr(step: u64, warmup: u64, peak: f64) -> Result<f64, TrainingError> {
    if step == 0 {
        return Err(TrainingError::Domain(
            "noam_lr is defined from step 1".into(),
        ));
    }
    if warmup == 0 {
        return Err(TrainingError::Domain("warmup must be at least 1".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

/// Adam with bias correction and a learning rate per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.dims()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with `lr_encoder` for the encoder group and `lr_new` for the
    /// rest.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr_encoder: f64, lr_new: f64) {
        let (b1, b2) = ADAM_BETAS;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let lr = match model.param_group(id) {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::NewModules => lr_new,
            };
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = model.params_mut().get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}
