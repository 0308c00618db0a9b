use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Frame-rate reduction of the convolutional frontend.
    pub conv_downsample: usize,
    /// Width of the raw acoustic feature vectors.
    pub feat_dim: usize,
    pub taee_dim: usize,
    pub taee_ffn: usize,
    pub taee_heads: usize,
    /// Real tokens, blank excluded.
    pub vocab_size: usize,
    /// Longest sequence the encoder accepts (frames, plus tokens in pass 2).
    pub max_frames: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            num_blocks: 4,
            conv_downsample: 4,
            feat_dim: 16,
            taee_dim: 64,
            taee_ffn: 256,
            taee_heads: 4,
            vocab_size: 21,
            max_frames: 4096,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// `(model_dim, ffn_dim, heads)` presets used for large-scale runs.
    pub fn preset(name: &str) -> Option<(usize, usize, usize)> {
        match name {
            "d256" => Some((256, 2048, 4)),
            "d512" => Some((512, 2048, 8)),
            "d768" => Some((768, 3072, 12)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.taee_dim == 0 || self.taee_heads == 0 || !self.taee_dim.is_multiple_of(self.taee_heads) {
            return bad(format!(
                "taee_dim {} must be a positive multiple of taee_heads {}",
                self.taee_dim, self.taee_heads
            ));
        }
        if self.conv_downsample == 0 {
            return bad("conv_downsample must be at least 1".into());
        }
        if self.vocab_size < 1 {
            return bad("vocab_size must count at least one token besides blank".into());
        }
        if self.ffn_dim == 0 || self.taee_ffn == 0 || self.feat_dim == 0 || self.max_frames == 0 {
            return bad("ffn_dim, taee_ffn, feat_dim and max_frames must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Strides of the two frontend convolutions; a single stride-1 layer
    /// when there is no downsampling.
    pub fn conv_strides(&self) -> Vec<usize> {
        let f = self.conv_downsample;
        if f == 1 {
            return vec![1];
        }
        let first = (2..=f)
            .find(|p| f.is_multiple_of(*p))
            .expect("f > 1 has a prime factor");
        vec![first, f / first]
    }

    /// Encoder frames produced from `raw_frames` input frames.
    pub fn encoder_frames(&self, raw_frames: usize) -> usize {
        raw_frames.div_ceil(self.conv_downsample)
    }
}
