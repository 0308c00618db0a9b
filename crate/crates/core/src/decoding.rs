//! Iterative decoding: sampled alignments of the CTC lattice become token
//! embeddings, the second pass runs once per sampled branch, and branches are
//! ranked by a pluggable score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ctc::{collapse, esa_sample, greedy_decode, segment_boundaries, LogProbLattice};
use crate::model::{HiddenFeatures, Model, ModelError, TokenAcousticEmbeddings};
use crate::numerics::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Samples per iteration `(S₁, …, S_N)` and the confidence threshold used at
/// each iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSchedule {
    samples: Vec<usize>,
    thresholds: Vec<f64>,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        DecodeSchedule::uniform(vec![25, 2], DEFAULT_THRESHOLD).expect("valid default")
    }
}

impl DecodeSchedule {
    pub fn new(samples: Vec<usize>, thresholds: Vec<f64>) -> Result<Self, DecodeError> {
        if samples.is_empty() {
            return Err(DecodeError::Schedule(
                "at least one iteration is required".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|&s| s == 0) {
            return Err(DecodeError::Schedule(format!(
                "iteration {} has zero samples",
                i + 1
            )));
        }
        if thresholds.len() != samples.len() {
            return Err(DecodeError::Schedule(format!(
                "{} thresholds for {} iterations",
                thresholds.len(),
                samples.len()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(DecodeError::Schedule(format!(
                "threshold {t} outside [0, 1]"
            )));
        }
        Ok(DecodeSchedule {
            samples,
            thresholds,
        })
    }

    pub fn uniform(samples: Vec<usize>, threshold: f64) -> Result<Self, DecodeError> {
        let n = samples.len();
        Self::new(samples, vec![threshold; n])
    }

    /// Parses `"25,2"`.
    pub fn parse(text: &str, threshold: f64) -> Result<Self, DecodeError> {
        let samples = text
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    DecodeError::Schedule(format!("bad sample count {s:?} in {text:?}"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::uniform(samples, threshold)
    }

    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// `∏ Sₙ`.
    pub fn total_branches(&self) -> usize {
        self.samples.iter().product()
    }

    /// Whether any iteration can draw more than one distinct alignment.
    pub fn samples_randomly(&self) -> bool {
        self.samples
            .iter()
            .zip(&self.thresholds)
            .any(|(&s, &t)| s > 1 && t > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Token ids (blank excluded).
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Index of the sampled alignment taken at each iteration.
    pub trace: Vec<usize>,
    pub token_log_probs: Vec<f64>,
}

pub trait Scorer: Sync {
    fn score(&self, hyp: &Hypothesis) -> f64;
}

/// Length-normalized token log-probability from the model's own CE head.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanLogProb;

impl Scorer for MeanLogProb {
    fn score(&self, hyp: &Hypothesis) -> f64 {
        if hyp.token_log_probs.is_empty() {
            return f64::NEG_INFINITY;
        }
        hyp.token_log_probs.iter().sum::<f64>() / hyp.token_log_probs.len() as f64
    }
}

pub fn rank(hyp: &Hypothesis) -> f64 {
    MeanLogProb.score(hyp)
}

/// Scores every hypothesis and sorts descending; ties keep their order.
pub fn rank_all(hyps: &mut [Hypothesis], scorer: &dyn Scorer) {
    for h in hyps.iter_mut() {
        h.score = scorer.score(h);
    }
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStatus {
    Ok,
    /// No branch produced tokens; the greedy CTC transcript was used.
    FallbackGreedy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub pass2_forwards: usize,
    pub final_forwards: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Every branch, ranked best first.
    pub hypotheses: Vec<Hypothesis>,
    pub best: Vec<usize>,
    pub status: DecodeStatus,
    pub stats: DecodeStats,
}

#[derive(Clone, Copy)]
pub struct DecodeOptions<'s> {
    pub seed: u64,
    pub scorer: &'s dyn Scorer,
    /// Run the branches of an iteration on the rayon pool.
    pub parallel: bool,
}

impl Default for DecodeOptions<'_> {
    fn default() -> Self {
        DecodeOptions {
            seed: 0,
            scorer: &MeanLogProb,
            parallel: false,
        }
    }
}

struct Branch {
    trace: Vec<usize>,
    lattice: LogProbLattice,
    frame_out: Tensor,
    token_out: Tensor,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampler seed owned by one branch, so results do not depend on the order
/// branches are expanded in.
fn branch_seed(seed: u64, trace: &[usize]) -> u64 {
    trace
        .iter()
        .fold(splitmix(seed), |h, &k| splitmix(h ^ splitmix(k as u64 + 1)))
}

fn expand(
    model: &Model,
    hidden: &HiddenFeatures,
    parent: &Branch,
    samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Branch>, DecodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(branch_seed(seed, &parent.trace));
    let d = model.config().model_dim;
    esa_sample(&parent.lattice, threshold, samples, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(k, alignment)| {
            let tae = if collapse(&alignment.labels).is_empty() {
                TokenAcousticEmbeddings::empty(d)
            } else {
                let bounds = segment_boundaries(&alignment).map_err(ModelError::from)?;
                model.extract_tae(&parent.frame_out, &bounds)?
            };
            let out = model.encode_pass2(hidden, &tae)?;
            let lattice = model.ctc_head(&out.frame_out)?;
            let mut trace = parent.trace.clone();
            trace.push(k);
            Ok(Branch {
                trace,
                lattice,
                frame_out: out.frame_out,
                token_out: out.token_out,
            })
        })
        .collect()
}

/// Iterative decoding over the branching `schedule`.
pub fn decode_utterance(
    model: &Model,
    features: &Tensor,
    schedule: &DecodeSchedule,
    opts: &DecodeOptions,
) -> Result<DecodeResult, DecodeError> {
    let hidden = model.conv_frontend(features)?;
    let pass1 = model.encode_pass1(&hidden)?;
    let lattice1 = model.ctc_head(&pass1.frame_out)?;
    let greedy = collapse(&greedy_decode(&lattice1).alignment.labels);
    let mut branches = vec![Branch {
        trace: Vec::new(),
        lattice: lattice1,
        frame_out: pass1.frame_out,
        token_out: pass1.token_out,
    }];
    let mut stats = DecodeStats::default();
    for (&s, &thr) in schedule.samples().iter().zip(schedule.thresholds()) {
        let grown: Vec<Vec<Branch>> = if opts.parallel {
            branches
                .par_iter()
                .map(|b| expand(model, &hidden, b, s, thr, opts.seed))
                .collect::<Result<_, _>>()?
        } else {
            branches
                .iter()
                .map(|b| expand(model, &hidden, b, s, thr, opts.seed))
                .collect::<Result<_, _>>()?
        };
        branches = grown.into_iter().flatten().collect();
        stats.pass2_forwards += branches.len();
    }
    stats.final_forwards = branches.len();

    let mut hypotheses = branches
        .into_iter()
        .map(|b| {
            let (tokens, token_log_probs) = if b.token_out.rows() == 0 {
                (Vec::new(), Vec::new())
            } else {
                argmax_tokens(&model.ce_head(&b.token_out)?)
            };
            Ok(Hypothesis {
                tokens,
                score: 0.0,
                trace: b.trace,
                token_log_probs,
            })
        })
        .collect::<Result<Vec<_>, DecodeError>>()?;
    rank_all(&mut hypotheses, opts.scorer);

    let (best, status) = match hypotheses.iter().find(|h| !h.tokens.is_empty()) {
        Some(h) => (h.tokens.clone(), DecodeStatus::Ok),
        None => (greedy, DecodeStatus::FallbackGreedy),
    };
    Ok(DecodeResult {
        hypotheses,
        best,
        status,
        stats,
    })
}

/// Row-wise argmax of CE log-probabilities `[U, V]`, as token ids.
fn argmax_tokens(logp: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (0..logp.rows())
        .map(|u| {
            let row = logp.row(u);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            (best + 1, row[best])
        })
        .unzip()
}

/// CTC baseline: first pass, frame-wise argmax, collapse.
pub fn decode_greedy_ctc(model: &Model, features: &Tensor) -> Result<Hypothesis, DecodeError> {
    let hidden = model.conv_frontend(features)?;
    let pass1 = model.encode_pass1(&hidden)?;
    let g = greedy_decode(&model.ctc_head(&pass1.frame_out)?);
    Ok(Hypothesis {
        tokens: collapse(&g.alignment.labels),
        score: g.alignment.score,
        trace: Vec::new(),
        token_log_probs: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            num_blocks: 2,
            conv_downsample: 2,
            feat_dim: 3,
            taee_dim: 8,
            taee_ffn: 16,
            taee_heads: 2,
            vocab_size: 4,
            max_frames: 256,
            dropout: 0.0,
        };
        Model::new(cfg, 3).unwrap()
    }

    fn feats(rows: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            3,
            (0..rows * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn hyp(lps: &[f64]) -> Hypothesis {
        Hypothesis {
            tokens: vec![1; lps.len()],
            score: 0.0,
            trace: vec![],
            token_log_probs: lps.to_vec(),
        }
    }

    #[test]
    fn schedule_parsing() {
        let s = DecodeSchedule::parse("25,2", 0.9).unwrap();
        assert_eq!(s.samples(), &[25, 2]);
        assert_eq!(s.total_branches(), 50);
        assert_eq!(s, DecodeSchedule::default());
        assert!(DecodeSchedule::parse("3,x", 0.9).is_err());
        assert!(DecodeSchedule::parse("0", 0.9).is_err());
        assert!(DecodeSchedule::parse("", 0.9).is_err());
        assert!(!DecodeSchedule::parse("1,1", 0.9)
            .unwrap()
            .samples_randomly());
        assert!(!DecodeSchedule::parse("5", 0.0).unwrap().samples_randomly());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&hyp(&[0.0, 0.0])), 0.0);
        let v = 7.0f64;
        assert!((rank(&hyp(&[-v.ln(); 3])) + v.ln()).abs() < 1e-15);
        assert_eq!(rank(&hyp(&[])), f64::NEG_INFINITY);
    }

    #[test]
    fn ties_keep_branch_order() {
        let mut hs: Vec<Hypothesis> = (0..4)
            .map(|i| Hypothesis {
                trace: vec![i],
                ..hyp(&[-0.5])
            })
            .collect();
        hs[2].token_log_probs = vec![-0.1];
        rank_all(&mut hs, &MeanLogProb);
        let order: Vec<usize> = hs.iter().map(|h| h.trace[0]).collect();
        assert_eq!(order, vec![2, 0, 1, 3]);
    }

    #[test]
    fn branch_count_is_product_of_schedule() {
        let m = tiny();
        let x = feats(20, 1);
        let s = DecodeSchedule::parse("3,2", 0.9).unwrap();
        let r = decode_utterance(
            &m,
            &x,
            &s,
            &DecodeOptions {
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.hypotheses.len(), 6);
        assert_eq!(
            r.stats,
            DecodeStats {
                pass2_forwards: 3 + 6,
                final_forwards: 6
            }
        );
        let mut traces: Vec<_> = r.hypotheses.iter().map(|h| h.trace.clone()).collect();
        traces.sort();
        let expected: Vec<Vec<usize>> = (0..3)
            .flat_map(|a| (0..2).map(move |b| vec![a, b]))
            .collect();
        assert_eq!(traces, expected);
        for w in r.hypotheses.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible_and_parallel_matches() {
        let m = tiny();
        let x = feats(24, 2);
        let s = DecodeSchedule::parse("4,3", 0.9).unwrap();
        let seq = DecodeOptions {
            seed: 11,
            ..Default::default()
        };
        let par = DecodeOptions {
            parallel: true,
            ..seq
        };
        let a = decode_utterance(&m, &x, &s, &seq).unwrap();
        let b = decode_utterance(&m, &x, &s, &seq).unwrap();
        let c = decode_utterance(&m, &x, &s, &par).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn greedy_schedule_is_single_deterministic_branch() {
        let m = tiny();
        let x = feats(16, 3);
        let s = DecodeSchedule::parse("1", 0.0).unwrap();
        let a = decode_utterance(
            &m,
            &x,
            &s,
            &DecodeOptions {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let b = decode_utterance(
            &m,
            &x,
            &s,
            &DecodeOptions {
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.hypotheses.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn hypothesis_tokens_match_alignment_length() {
        // with one greedy sample, the token count equals the collapsed
        // greedy length of the first-pass lattice
        let m = tiny();
        let x = feats(30, 4);
        let s = DecodeSchedule::parse("1", 0.0).unwrap();
        let r = decode_utterance(&m, &x, &s, &DecodeOptions::default()).unwrap();
        let h = m.conv_frontend(&x).unwrap();
        let lat = m.ctc_head(&m.encode_pass1(&h).unwrap().frame_out).unwrap();
        let n = collapse(&greedy_decode(&lat).alignment.labels).len();
        assert_eq!(r.hypotheses[0].tokens.len(), n);
        assert_eq!(r.hypotheses[0].token_log_probs.len(), n);
        assert!(r.hypotheses[0].tokens.iter().all(|&t| (1..=4).contains(&t)));
    }

    #[test]
    fn greedy_ctc_is_deterministic() {
        let m = tiny();
        let x = feats(18, 6);
        assert_eq!(
            decode_greedy_ctc(&m, &x).unwrap(),
            decode_greedy_ctc(&m, &x).unwrap()
        );
    }
}
