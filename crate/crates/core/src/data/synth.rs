//! Synthetic speech-like task with known frame alignments.
//!
//! Every token owns a mean feature vector; an utterance is a run of token
//! segments separated by silence, and every frame is its segment's mean plus
//! isotropic Gaussian noise. Alignments are drawn at the encoder frame rate
//! and each logical frame is repeated as `frame_rate_multiple` identical raw
//! frames, so a frontend that downsamples by the same factor sees one encoder
//! frame per logical frame and CTC feasibility survives the downsampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{detokenize, write_feat, DataError, ManifestRecord, Utterance, Vocab, UNK_TOKEN};
use crate::ctc::BLANK;
use crate::numerics::Tensor;

/// Seconds per raw frame.
pub const FRAME_SHIFT_SECS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    /// Word tokens; the vocabulary also carries blank and `<unk>`.
    pub vocab_size: usize,
    /// Inclusive range of logical frames per token.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of silence frames around and between tokens.
    pub silence_frames: (usize, usize),
    pub tokens_per_utt: (usize, usize),
    pub feat_dim: usize,
    /// Raw frames per logical frame.
    pub frame_rate_multiple: usize,
    pub noise_scale: f64,
    /// Fixes the token mean vectors; splits of one task share it.
    pub task_seed: u64,
    /// Drives transcripts, durations and noise.
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab_size: 20,
            frames_per_token: (2, 5),
            silence_frames: (0, 3),
            tokens_per_utt: (3, 8),
            feat_dim: 16,
            frame_rate_multiple: 4,
            noise_scale: 0.3,
            task_seed: 0,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        let range = |name: &str, (lo, hi): (usize, usize), min: usize| {
            if lo < min || lo > hi {
                Err(format!(
                    "{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi"
                ))
            } else {
                Ok(())
            }
        };
        range("frames_per_token", self.frames_per_token, 1)?;
        range("silence_frames", self.silence_frames, 0)?;
        range("tokens_per_utt", self.tokens_per_utt, 1)?;
        if self.vocab_size == 0 || self.feat_dim == 0 || self.frame_rate_multiple == 0 {
            return Err("vocab_size, feat_dim and frame_rate_multiple must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(format!(
                "noise_scale must be non-negative, got {}",
                self.noise_scale
            ));
        }
        Ok(())
    }

    /// `<blank>`, `<unk>`, `w00`, `w01`, …
    pub fn vocab(&self) -> Vocab {
        let words = (0..self.vocab_size).map(|i| format!("w{i:02}"));
        Vocab::from_tokens(std::iter::once(UNK_TOKEN.to_string()).chain(words))
            .expect("generated names are unique")
    }

    /// Mean vector per word token, each coordinate uniform in [-1, 1).
    pub fn means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        (0..self.vocab_size)
            .map(|_| {
                (0..self.feat_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthTaskSpec,
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
}

pub fn synth_generate(spec: &SynthTaskSpec, num_utts: usize) -> Result<SynthDataset, String> {
    spec.validate()?;
    let vocab = spec.vocab();
    let first_word = vocab.id("w00").expect("word tokens present");
    let means = spec.means();
    let noise = Normal::new(0.0, spec.noise_scale.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let range = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.random_range(lo..=hi);

    let mut utterances = Vec::with_capacity(num_utts);
    for i in 0..num_utts {
        let n = range(&mut rng, spec.tokens_per_utt);
        let tokens: Vec<usize> = (0..n)
            .map(|_| first_word + rng.random_range(0..spec.vocab_size))
            .collect();

        let mut labels = vec![BLANK; range(&mut rng, spec.silence_frames)];
        for (k, &tok) in tokens.iter().enumerate() {
            if k > 0 {
                let mut gap = range(&mut rng, spec.silence_frames);
                if tokens[k - 1] == tok {
                    gap = gap.max(1);
                }
                labels.extend(std::iter::repeat_n(BLANK, gap));
            }
            labels.extend(std::iter::repeat_n(
                tok,
                range(&mut rng, spec.frames_per_token),
            ));
        }
        labels.extend(std::iter::repeat_n(
            BLANK,
            range(&mut rng, spec.silence_frames),
        ));

        let m = spec.frame_rate_multiple;
        let raw = labels.len() * m;
        let mut data = Vec::with_capacity(raw * spec.feat_dim);
        for &l in &labels {
            let frame: Vec<f64> = (0..spec.feat_dim)
                .map(|d| {
                    let mean = if l == BLANK {
                        0.0
                    } else {
                        means[l - first_word][d]
                    };
                    let eps = if spec.noise_scale > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    mean + eps
                })
                .collect();
            for _ in 0..m {
                data.extend_from_slice(&frame);
            }
        }
        utterances.push(Utterance {
            id: format!("s{}-{i:05}", spec.seed),
            features: Tensor::matrix(raw, spec.feat_dim, data).expect("sized above"),
            tokens,
            alignment: Some(labels),
            duration: raw as f64 * FRAME_SHIFT_SECS,
        });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        vocab,
        utterances,
    })
}

/// Writes `vocab.txt`, `manifest.tsv`, `alignments.tsv` and `feats/<id>.feat`.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<(), DataError> {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(|e| DataError::io(&feats, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| DataError::io(p, e))
    };
    write("vocab.txt", ds.vocab.to_file_text())?;
    let mut manifest = String::new();
    let mut aligns = String::new();
    for u in &ds.utterances {
        let rel = Path::new("feats").join(format!("{}.feat", u.id));
        write_feat(&dir.join(&rel), &u.features)?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            feature_path: rel,
            frames: u.features.rows(),
            duration: u.duration,
            transcript: detokenize(&u.tokens, &ds.vocab),
        };
        manifest.push_str(&rec.to_line());
        manifest.push('\n');
        if let Some(a) = &u.alignment {
            let labels: Vec<String> = a.iter().map(usize::to_string).collect();
            aligns.push_str(&format!("{}\t{}\n", u.id, labels.join(" ")));
        }
    }
    write("manifest.tsv", manifest)?;
    write("alignments.tsv", aligns)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{collapse, min_frames};
    use crate::data::{load_manifest, load_vocab};

    #[test]
    fn gold_alignments_collapse_to_transcripts() {
        let ds = synth_generate(&SynthTaskSpec::default(), 200).unwrap();
        for u in &ds.utterances {
            let a = u.alignment.as_ref().unwrap();
            assert_eq!(collapse(a), u.tokens);
            assert!(a.len() >= min_frames(&u.tokens));
            assert_eq!(u.features.rows(), 4 * a.len());
            assert!(u.duration > 0.0);
            assert!(u.tokens.iter().all(|&t| (2..=21).contains(&t)));
        }
        assert_eq!(ds.vocab.size(), 21);
        assert_eq!(ds.vocab.unk(), Some(1));
    }

    #[test]
    fn zero_noise_frames_equal_the_mean() {
        let spec = SynthTaskSpec {
            noise_scale: 0.0,
            ..SynthTaskSpec::default()
        };
        let means = spec.means();
        let ds = synth_generate(&spec, 20).unwrap();
        for u in &ds.utterances {
            for (t, &l) in u.alignment.as_ref().unwrap().iter().enumerate() {
                for r in 0..4 {
                    let row = u.features.row(4 * t + r);
                    if l == BLANK {
                        assert!(row.iter().all(|&v| v == 0.0));
                    } else {
                        assert_eq!(row, &means[l - 2][..]);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let spec = SynthTaskSpec {
            seed: 3,
            ..SynthTaskSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &synth_generate(&spec, 10).unwrap()).unwrap();
        write_dataset(b.path(), &synth_generate(&spec, 10).unwrap()).unwrap();
        for name in [
            "vocab.txt",
            "manifest.tsv",
            "alignments.tsv",
            "feats/s3-00007.feat",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthTaskSpec::default(), 5).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let vocab = load_vocab(&dir.path().join("vocab.txt")).unwrap();
        let utts = load_manifest(&dir.path().join("manifest.tsv"), &vocab).unwrap();
        assert_eq!(utts.len(), 5);
        for (a, b) in utts.iter().zip(&ds.utterances) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.alignment, b.alignment);
            assert_eq!(a.features.dims(), b.features.dims());
        }
    }

    #[test]
    fn repeats_always_have_a_separating_blank() {
        let spec = SynthTaskSpec {
            vocab_size: 1,
            silence_frames: (0, 0),
            ..SynthTaskSpec::default()
        };
        let ds = synth_generate(&spec, 10).unwrap();
        for u in &ds.utterances {
            assert_eq!(collapse(u.alignment.as_ref().unwrap()), u.tokens);
        }
    }
}
