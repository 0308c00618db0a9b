//! Word error rate scoring and real-time-factor measurement.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::data::{Utterance, UNK_TOKEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("utterance ids differ; missing from hypotheses: {missing_hyp:?}; missing from references: {missing_ref:?}")]
    IdMismatch {
        missing_hyp: Vec<String>,
        missing_ref: Vec<String>,
    },
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("{0}")]
    Domain(String),
}

/// Edit operation counts for one reference/hypothesis pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
    }
}

/// Unit-cost Levenshtein alignment. The backtrace prefers a diagonal step
/// (match or substitution), then insertion, then deletion.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == d[(i - 1) * w + j - 1] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[i * w + j - 1] + 1 {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    c
}

/// Pooled WER over `(reference, hypothesis)` id sequences, ignoring
/// `unknown` on both sides.
pub fn corpus_wer_ids(pairs: &[(Vec<usize>, Vec<usize>)], unknown: Option<usize>) -> f64 {
    let strip =
        |v: &[usize]| -> Vec<usize> { v.iter().copied().filter(|&t| Some(t) != unknown).collect() };
    let mut totals = EditCounts::default();
    for (r, h) in pairs {
        totals.add(&edit_counts(&strip(r), &strip(h)));
    }
    ScoreReport {
        totals,
        utterances: Vec::new(),
    }
    .wer()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub totals: EditCounts,
    /// In reference order.
    pub utterances: Vec<UtteranceScore>,
}

impl ScoreReport {
    /// `(S + D + I) / N` over the corpus. With an empty reference side this
    /// is 0 when there are no insertions and infinite otherwise.
    pub fn wer(&self) -> f64 {
        let e = self.totals.errors();
        match self.totals.ref_len {
            0 if e == 0 => 0.0,
            0 => f64::INFINITY,
            n => e as f64 / n as f64,
        }
    }

    /// `id  S  D  I  N` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tsub\tdel\tins\tref_len\n");
        for u in &self.utterances {
            let c = &u.counts;
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id, c.substitutions, c.deletions, c.insertions, c.ref_len
            ));
        }
        s
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.totals;
        writeln!(f, "utterances: {}", self.utterances.len())?;
        writeln!(f, "ref_tokens: {}", t.ref_len)?;
        writeln!(f, "substitutions: {}", t.substitutions)?;
        writeln!(f, "deletions: {}", t.deletions)?;
        writeln!(f, "insertions: {}", t.insertions)?;
        write!(f, "wer: {:.4}", self.wer())
    }
}

/// Corpus WER with `<unk>` removed from both sides first.
pub fn wer<S: AsRef<str>>(
    refs: &[(String, Vec<S>)],
    hyps: &[(String, Vec<S>)],
) -> Result<ScoreReport, EvalError> {
    wer_with_unknown(refs, hyps, UNK_TOKEN)
}

pub fn wer_with_unknown<S: AsRef<str>>(
    refs: &[(String, Vec<S>)],
    hyps: &[(String, Vec<S>)],
    unknown: &str,
) -> Result<ScoreReport, EvalError> {
    let mut hyp_index = HashMap::with_capacity(hyps.len());
    for (id, toks) in hyps {
        if hyp_index.insert(id.as_str(), toks).is_some() {
            return Err(EvalError::DuplicateId(id.clone()));
        }
    }
    let mut seen = HashMap::with_capacity(refs.len());
    for (id, _) in refs {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(EvalError::DuplicateId(id.clone()));
        }
    }
    let missing_hyp: Vec<String> = refs
        .iter()
        .filter(|(id, _)| !hyp_index.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    let missing_ref: Vec<String> = hyps
        .iter()
        .filter(|(id, _)| !seen.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing_hyp.is_empty() || !missing_ref.is_empty() {
        return Err(EvalError::IdMismatch {
            missing_hyp,
            missing_ref,
        });
    }

    fn strip<'a, S: AsRef<str>>(v: &'a [S], unknown: &str) -> Vec<&'a str> {
        v.iter()
            .map(AsRef::as_ref)
            .filter(|t| *t != unknown)
            .collect()
    }
    let mut totals = EditCounts::default();
    let mut utterances = Vec::with_capacity(refs.len());
    for (id, r) in refs {
        let counts = edit_counts(&strip(r, unknown), &strip(hyp_index[id.as_str()], unknown));
        totals.add(&counts);
        utterances.push(UtteranceScore {
            id: id.clone(),
            counts,
        });
    }
    Ok(ScoreReport { totals, utterances })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtfReport {
    /// Median over repeats of the wall-clock for the whole set.
    pub wall_secs: f64,
    pub audio_secs: f64,
    /// Wall-clock of every repeat, in run order.
    pub repeats: [f64; 3],
}

impl RtfReport {
    pub fn rtf(&self) -> f64 {
        self.wall_secs / self.audio_secs
    }
}

impl fmt::Display for RtfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "decode_secs: {:.4}\naudio_secs: {:.2}\nrtf: {:.5}",
            self.wall_secs,
            self.audio_secs,
            self.rtf()
        )
    }
}

/// Times `decode` over every utterance, sequentially, three times and keeps
/// the median total. Only the calls are timed, so loading stays outside.
pub fn rtf<F, E>(mut decode: F, utterances: &[Utterance]) -> Result<RtfReport, EvalError>
where
    F: FnMut(&Utterance) -> Result<(), E>,
    E: fmt::Display,
{
    let audio_secs: f64 = utterances.iter().map(|u| u.duration).sum();
    if !(audio_secs > 0.0) {
        return Err(EvalError::Domain("dataset has zero total duration".into()));
    }
    let mut repeats = [0.0; 3];
    for r in &mut repeats {
        let start = Instant::now();
        for u in utterances {
            decode(u).map_err(|e| EvalError::Domain(format!("decode of {} failed: {e}", u.id)))?;
        }
        *r = start.elapsed().as_secs_f64();
    }
    let mut sorted = repeats;
    sorted.sort_by(f64::total_cmp);
    Ok(RtfReport {
        wall_secs: sorted[1],
        audio_secs,
        repeats,
    })
}
