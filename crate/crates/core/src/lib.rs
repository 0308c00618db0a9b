//! Encoder-only two-pass non-autoregressive speech recognition.
//!
//! A single contextual encoder runs twice per utterance: once over acoustic
//! frames to produce a CTC lattice, and again over the frames concatenated
//! with token-level acoustic embeddings pooled from an alignment of that
//! lattice. Training combines CTC losses on both passes with token
//! cross-entropy; decoding samples alignments and iterates the second pass.

pub mod config;
pub mod ctc;
pub mod data;
pub mod decoding;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;
