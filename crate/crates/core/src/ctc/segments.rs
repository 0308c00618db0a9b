use super::{Alignment, CtcError, BLANK};

/// Per-token half-open frame spans partitioning `[0, T)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentBoundaries {
    spans: Vec<(usize, usize)>,
    frames: usize,
}

impl SegmentBoundaries {
    /// Checks the partition invariant: contiguous, ordered, non-empty spans
    /// covering `[0, frames)`.
    pub fn new(spans: Vec<(usize, usize)>, frames: usize) -> Result<Self, CtcError> {
        let mut cursor = 0;
        for &(s, e) in &spans {
            if s != cursor || e <= s {
                return Err(crate::numerics::NumericsError::Contract(format!(
                    "spans {spans:?} do not partition [0, {frames})"
                ))
                .into());
            }
            cursor = e;
        }
        if cursor != frames || spans.is_empty() {
            return Err(crate::numerics::NumericsError::Contract(format!(
                "spans {spans:?} do not partition [0, {frames})"
            ))
            .into());
        }
        Ok(SegmentBoundaries { spans, frames })
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Token spans from an alignment. Token `u` ends at its last emission frame;
/// blanks before a token attach to it, trailing blanks attach to the last
/// token.
pub fn segment_boundaries(alignment: &Alignment) -> Result<SegmentBoundaries, CtcError> {
    let labels = &alignment.labels;
    let mut ends = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        if l == BLANK {
            continue;
        }
        let continues = t > 0 && labels[t - 1] == l;
        if continues {
            *ends.last_mut().expect("run has a start") = t + 1;
        } else {
            ends.push(t + 1);
        }
    }
    if ends.is_empty() {
        return Err(CtcError::EmptyAlignment);
    }
    let frames = labels.len();
    *ends.last_mut().expect("non-empty") = frames;
    let mut spans = Vec::with_capacity(ends.len());
    let mut start = 0;
    for e in ends {
        spans.push((start, e));
        start = e;
    }
    Ok(SegmentBoundaries { spans, frames })
}
