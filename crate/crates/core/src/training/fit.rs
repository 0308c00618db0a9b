use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    joint_loss, noam_lr, Adam, Checkpoint, JointLoss, LossWeights, TrainConfig, TrainMeta,
    TrainingError,
};
use crate::ctc::min_frames;
use crate::data::Utterance;
use crate::decoding::{decode_greedy_ctc, decode_utterance, DecodeOptions, DecodeSchedule};
use crate::eval::corpus_wer_ids;
use crate::model::{Dropout, Model};
use crate::numerics::Gradients;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    /// Encoder-group learning rate at the last step of the epoch.
    pub lr: f64,
    pub lr_new_modules: f64,
    pub l_dec: f64,
    pub l_ctc1: f64,
    pub l_ctc2: f64,
    pub valid_wer_greedy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_wer_unienc: Option<f64>,
    pub skipped: usize,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Training utterances left out because their targets cannot be aligned.
    pub skipped: usize,
}

/// Mean losses over the utterances of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_dec: f64,
    pub l_ctc1: f64,
    pub l_ctc2: f64,
}

/// Single-writer training state: model, optimizer, counters and the best
/// snapshot seen so far.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub meta: TrainMeta,
    best: Option<Model>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    /// Token ignored when scoring validation WER.
    pub unknown_id: Option<usize>,
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

impl Trainer {
    pub fn new(
        model: Model,
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self, TrainingError> {
        config.validate()?;
        weights.validate()?;
        let adam = Adam::new(&model);
        Ok(Trainer {
            model,
            adam,
            meta: TrainMeta::default(),
            best: None,
            config,
            weights,
            unknown_id: None,
        })
    }

    /// Continues from a saved state; a checkpoint without optimizer moments
    /// starts them from zero.
    pub fn resume(
        ck: Checkpoint,
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self, TrainingError> {
        let mut t = Trainer::new(ck.model, config, weights)?;
        if let Some(adam) = ck.optim {
            t.adam = adam;
        }
        t.meta = ck.meta;
        Ok(t)
    }

    /// Best-validation parameters so far, or the current ones before any
    /// validation has run in this session.
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn learning_rates(&self, step: u64) -> Result<(f64, f64), TrainingError> {
        let w = self.config.warmup_steps;
        Ok((
            noam_lr(step, w, self.config.peak_lr_encoder)?,
            noam_lr(step, w, self.config.peak_lr_new_modules)?,
        ))
    }

    /// Whether the model can be trained on `u` at all.
    pub fn feasible(&self, u: &Utterance) -> bool {
        let cfg = self.model.config();
        let raw = u.features.rows();
        if raw < cfg.conv_downsample || u.tokens.is_empty() {
            return false;
        }
        if u.tokens.iter().any(|&t| t == 0 || t > cfg.vocab_size) {
            return false;
        }
        let frames = cfg.encoder_frames(raw);
        frames >= min_frames(&u.tokens) && frames + u.tokens.len() <= cfg.max_frames
    }

    /// Length-sorted batches under the frame budget, in a per-epoch shuffled
    /// order.
    pub fn batches<'u>(&self, utts: &[&'u Utterance], epoch: u64) -> Vec<Vec<&'u Utterance>> {
        let mut order: Vec<&Utterance> = utts.to_vec();
        order.sort_by_key(|u| u.features.rows());
        let mut out: Vec<Vec<&Utterance>> = Vec::new();
        let mut frames = 0;
        for u in order {
            let n = u.features.rows();
            match out.last_mut() {
                Some(b) if frames + n <= self.config.batch_frame_budget => {
                    b.push(u);
                    frames += n;
                }
                _ => {
                    out.push(vec![u]);
                    frames = n;
                }
            }
        }
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[
            self.config.seed,
            epoch,
        ])));
        out
    }

    /// Forward/backward over a batch, gradient averaging, clipping and one
    /// optimizer update. On a non-finite loss or gradient nothing changes.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<StepLosses, TrainingError> {
        let step = self.meta.step + 1;
        let (seed, rate) = (self.config.seed, self.model.config().dropout);
        let model = &self.model;
        let weights = self.weights;
        let results: Vec<JointLoss> = batch
            .par_iter()
            .enumerate()
            .map(|(i, u)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, step, i as u64]));
                let mut dropout = Dropout {
                    rate,
                    rng: &mut rng,
                };
                joint_loss(model, &u.features, &u.tokens, &weights, Some(&mut dropout))
            })
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                TrainingError::Numerics(n) => TrainingError::Diverged {
                    step,
                    what: n.to_string(),
                },
                other => other,
            })?;

        let n = results.len() as f64;
        let mut grads = Gradients::zeros_like(self.model.params());
        let mut losses = StepLosses::default();
        for r in &results {
            grads.add_assign(&r.grads);
            losses.total += r.total / n;
            losses.l_dec += r.l_dec / n;
            losses.l_ctc1 += r.l_ctc1 / n;
            losses.l_ctc2 += r.l_ctc2 / n;
        }
        grads.scale(1.0 / n);
        if !losses.total.is_finite() {
            return Err(TrainingError::Diverged {
                step,
                what: "loss".into(),
            });
        }
        if !grads.is_finite() {
            return Err(TrainingError::Diverged {
                step,
                what: "gradient".into(),
            });
        }
        let norm = grads.global_norm();
        if norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / norm);
        }
        let (lr_enc, lr_new) = self.learning_rates(step)?;
        self.adam.step(&mut self.model, &grads, lr_enc, lr_new);
        self.meta.step = step;
        Ok(losses)
    }

    /// Pooled WER of greedy CTC decoding.
    pub fn greedy_wer(&self, model: &Model, utts: &[Utterance]) -> f64 {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = utts
            .par_iter()
            .map(|u| {
                let hyp = decode_greedy_ctc(model, &u.features)
                    .map(|h| h.tokens)
                    .unwrap_or_default();
                (u.tokens.clone(), hyp)
            })
            .collect();
        corpus_wer_ids(&pairs, self.unknown_id)
    }

    /// Pooled WER of iterative decoding.
    pub fn unienc_wer(
        &self,
        model: &Model,
        utts: &[Utterance],
        schedule: &DecodeSchedule,
        seed: u64,
    ) -> f64 {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = utts
            .par_iter()
            .map(|u| {
                let opts = DecodeOptions {
                    seed,
                    ..DecodeOptions::default()
                };
                let hyp = decode_utterance(model, &u.features, schedule, &opts)
                    .map(|r| r.best)
                    .unwrap_or_default();
                (u.tokens.clone(), hyp)
            })
            .collect();
        corpus_wer_ids(&pairs, self.unknown_id)
    }

    /// One pass over the training set followed by validation and the
    /// early-stopping bookkeeping.
    pub fn run_epoch(
        &mut self,
        train: &[Utterance],
        valid: &[Utterance],
    ) -> Result<EpochRecord, TrainingError> {
        let usable: Vec<&Utterance> = train.iter().filter(|u| self.feasible(u)).collect();
        if usable.is_empty() {
            return Err(TrainingError::NoData);
        }
        let skipped = train.len() - usable.len();
        let epoch = self.meta.epoch + 1;
        let mut sums = StepLosses::default();
        let mut count = 0.0;
        for batch in self.batches(&usable, epoch) {
            let l = self.train_step(&batch)?;
            let k = batch.len() as f64;
            sums.l_dec += l.l_dec * k;
            sums.l_ctc1 += l.l_ctc1 * k;
            sums.l_ctc2 += l.l_ctc2 * k;
            count += k;
        }
        let wer = self.greedy_wer(&self.model, valid);
        if wer < self.meta.best_wer {
            self.meta.best_wer = wer;
            self.meta.bad_epochs = 0;
            self.best = Some(self.model.clone());
        } else {
            self.meta.bad_epochs += 1;
        }
        self.meta.epoch = epoch;
        let (lr, lr_new) = self.learning_rates(self.meta.step.max(1))?;
        Ok(EpochRecord {
            epoch,
            step: self.meta.step,
            lr,
            lr_new_modules: lr_new,
            l_dec: sums.l_dec / count,
            l_ctc1: sums.l_ctc1 / count,
            l_ctc2: sums.l_ctc2 / count,
            valid_wer_greedy: wer,
            valid_wer_unienc: None,
            skipped,
        })
    }

    /// Trains until `max_epochs` or until validation WER has not improved for
    /// `early_stop_patience` epochs. `on_epoch` sees every record (for
    /// logging and checkpointing) and may abort by returning an error.
    pub fn fit<F>(
        &mut self,
        train: &[Utterance],
        valid: &[Utterance],
        mut on_epoch: F,
    ) -> Result<FitOutcome, TrainingError>
    where
        F: FnMut(&EpochRecord, &Trainer) -> Result<(), TrainingError>,
    {
        if train.is_empty() || valid.is_empty() {
            return Err(TrainingError::NoData);
        }
        let skipped = train.iter().filter(|u| !self.feasible(u)).count();
        let mut records = Vec::new();
        let stop = loop {
            if self.meta.epoch >= self.config.max_epochs as u64 {
                break StopReason::MaxEpochs;
            }
            if self.meta.bad_epochs >= self.config.early_stop_patience as u64 {
                break StopReason::Patience;
            }
            let rec = self.run_epoch(train, valid)?;
            on_epoch(&rec, self)?;
            records.push(rec);
        };
        Ok(FitOutcome {
            records,
            stop,
            skipped,
        })
    }
}
