//! The shared-encoder network: convolutional frontend, a transformer encoder
//! run once over frames and once over frames plus token embeddings, the
//! token-embedding extractor, and the CTC and token heads.

mod config;

pub use config::ModelConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::{CtcError, LogProbLattice, SegmentBoundaries};
use crate::numerics::kernels::sinusoidal_positions;
use crate::numerics::{AttnMask, Graph, NodeId, NumericsError, ParamId, ParamStore, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds max_frames {max}")]
    Capacity { len: usize, max: usize },
    #[error("input of {frames} frames is shorter than the downsampling factor {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("boundaries cover {boundary_frames} frames but the encoder output has {frames}")]
    BoundaryMismatch {
        boundary_frames: usize,
        frames: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Frontend and contextual encoder (the part a pretrained model would supply).
    Encoder,
    /// Type embeddings, extractor and output heads.
    NewModules,
}

/// Frontend output `H`, `[T, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenFeatures(pub Tensor);

impl HiddenFeatures {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }
}

/// One embedding per output token, `[U, d]`, with the spans that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenAcousticEmbeddings {
    pub values: Tensor,
    pub boundaries: Option<SegmentBoundaries>,
}

impl TokenAcousticEmbeddings {
    pub fn empty(dim: usize) -> Self {
        TokenAcousticEmbeddings {
            values: Tensor::zeros(&[0, dim]),
            boundaries: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub frame_out: Tensor,
    pub token_out: Tensor,
}

/// Graph handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub frame_out: NodeId,
    pub token_out: Option<NodeId>,
}

/// Intermediate values of the token-embedding extractor.
#[derive(Clone, Debug)]
pub struct TaeTrace {
    /// Attention context before the feed-forward sublayer, `[U, taee_dim]`.
    pub context: Tensor,
    pub output: TokenAcousticEmbeddings,
}

/// Dropout state threaded through a training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId, NumericsError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        g.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln_attn: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ffn: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Extractor {
    q: Linear,
    k: Linear,
    v: Linear,
    ln: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    frontend: Vec<(usize, Linear)>,
    frame_type: ParamId,
    token_type: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNormParams,
    taee: Extractor,
    ctc_head: Linear,
    ce_head: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        let w = self.store.add(
            format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, data).expect("dims"),
        );
        let b = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNormParams {
        let gain = self
            .store
            .add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
        let bias = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNormParams { gain, bias }
    }

    fn embedding(&mut self, name: &str, dim: usize, scale: f64) -> ParamId {
        let data = (0..dim)
            .map(|_| self.rng.random_range(-scale..scale))
            .collect();
        self.store
            .add(name, Tensor::new(vec![dim], data).expect("dims"))
    }
}

/// The recognizer's parameters and forward computations.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.model_dim;

        let mut frontend = Vec::new();
        let mut width = config.feat_dim;
        for (i, &stride) in config.conv_strides().iter().enumerate() {
            let lin = b.linear(&format!("frontend.conv{i}"), stride * width, d);
            frontend.push((stride, lin));
            width = d;
        }
        let frame_type = b.embedding("type.frame", d, 0.1);
        let token_type = b.embedding("type.token", d, 0.1);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let p = format!("encoder.block{i}");
                EncoderBlock {
                    ln_attn: b.layer_norm(&format!("{p}.ln_attn"), d),
                    q: b.linear(&format!("{p}.attn.q"), d, d),
                    k: b.linear(&format!("{p}.attn.k"), d, d),
                    v: b.linear(&format!("{p}.attn.v"), d, d),
                    o: b.linear(&format!("{p}.attn.o"), d, d),
                    ln_ffn: b.layer_norm(&format!("{p}.ln_ffn"), d),
                    ffn_in: b.linear(&format!("{p}.ffn.in"), d, config.ffn_dim),
                    ffn_out: b.linear(&format!("{p}.ffn.out"), config.ffn_dim, d),
                }
            })
            .collect();
        let final_ln = b.layer_norm("encoder.final_ln", d);
        let td = config.taee_dim;
        let taee = Extractor {
            q: b.linear("taee.q", d, td),
            k: b.linear("taee.k", d, td),
            v: b.linear("taee.v", d, td),
            ln: b.layer_norm("taee.ln", td),
            ffn_in: b.linear("taee.ffn.in", td, config.taee_ffn),
            ffn_out: b.linear("taee.ffn.out", config.taee_ffn, td),
            proj: b.linear("taee.proj", td, d),
        };
        let ctc_head = b.linear("ctc_head", d, config.vocab_size + 1);
        let ce_head = b.linear("ce_head", d, config.vocab_size);
        let layout = Layout {
            frontend,
            frame_type,
            token_type,
            blocks,
            final_ln,
            taee,
            ctc_head,
            ce_head,
        };
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_group(&self, id: ParamId) -> ParamGroup {
        let name = self.params.name(id);
        if name.starts_with("frontend.") || name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::NewModules
        }
    }

    /// The shared CTC projection weight, used by both passes.
    pub fn ctc_head_weight(&self) -> ParamId {
        self.layout.ctc_head.w
    }

    pub fn ctc_head_bias(&self) -> ParamId {
        self.layout.ctc_head.b
    }

    pub fn ce_head_weight(&self) -> ParamId {
        self.layout.ce_head.w
    }

    pub fn ce_head_bias(&self) -> ParamId {
        self.layout.ce_head.b
    }

    /// Weight and bias ids of the extractor's query and value projections.
    pub fn taee_query_value(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        let t = &self.layout.taee;
        (t.q.w, t.q.b, t.v.w, t.v.b)
    }

    // ---- graph-level forwards -------------------------------------------

    /// Strided convolution stack on a graph.
    pub fn frontend_graph(&self, g: &mut Graph, features: &Tensor) -> Result<NodeId, ModelError> {
        let raw = features.rows();
        if features.cols() != self.config.feat_dim {
            return Err(NumericsError::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.config.feat_dim
            ))
            .into());
        }
        if raw < self.config.conv_downsample {
            return Err(ModelError::TooShort {
                frames: raw,
                needed: self.config.conv_downsample,
            });
        }
        let mut x = g.input(features.clone());
        let last = self.layout.frontend.len() - 1;
        for (i, (stride, lin)) in self.layout.frontend.iter().enumerate() {
            if *stride > 1 {
                x = g.unfold(x, *stride)?;
            }
            x = g.linear(x, lin.w, lin.b)?;
            if i < last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    fn embed_positions(
        &self,
        g: &mut Graph,
        x: NodeId,
        type_emb: ParamId,
    ) -> Result<NodeId, ModelError> {
        let (n, d) = (g.value(x).rows(), g.value(x).cols());
        let x = g.add_const(x, &sinusoidal_positions(n, d))?;
        let t = g.param(type_emb);
        Ok(g.add_bias(x, t)?)
    }

    /// Runs the contextual encoder over `H` and, in the second pass, the
    /// token embeddings appended after the frames. `isolate_modalities`
    /// forbids frame↔token attention (an ablation used in tests).
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        tae: Option<NodeId>,
        isolate_modalities: bool,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncodedNodes, ModelError> {
        let frames = g.value(hidden).rows();
        let tokens = tae.map_or(0, |t| g.value(t).rows());
        let total = frames + tokens;
        if total > self.config.max_frames {
            return Err(ModelError::Capacity {
                len: total,
                max: self.config.max_frames,
            });
        }
        let mut x = self.embed_positions(g, hidden, self.layout.frame_type)?;
        if let Some(t) = tae.filter(|_| tokens > 0) {
            let t = self.embed_positions(g, t, self.layout.token_type)?;
            x = g.concat_rows(&[x, t])?;
        }
        let mask = (isolate_modalities && tokens > 0).then(|| {
            let allowed = (0..total)
                .flat_map(|i| (0..total).map(move |j| (i < frames) == (j < frames)))
                .collect();
            AttnMask::new(total, total, allowed).expect("square mask")
        });
        for block in &self.layout.blocks {
            x = self.block_graph(g, block, x, mask.as_ref(), dropout.as_deref_mut())?;
        }
        let x = g.layer_norm(x, self.layout.final_ln.gain, self.layout.final_ln.bias)?;
        if tokens == 0 {
            return Ok(EncodedNodes {
                frame_out: x,
                token_out: None,
            });
        }
        let frame_out = g.slice_rows(x, 0, frames)?;
        let token_out = g.slice_rows(x, frames, tokens)?;
        Ok(EncodedNodes {
            frame_out,
            token_out: Some(token_out),
        })
    }

    fn block_graph(
        &self,
        g: &mut Graph,
        p: &EncoderBlock,
        x: NodeId,
        mask: Option<&AttnMask>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<NodeId, ModelError> {
        let a = g.layer_norm(x, p.ln_attn.gain, p.ln_attn.bias)?;
        let q = g.linear(a, p.q.w, p.q.b)?;
        let k = g.linear(a, p.k.w, p.k.b)?;
        let v = g.linear(a, p.v.w, p.v.b)?;
        let ctx = g.attention(q, k, v, self.config.num_heads, mask)?;
        let mut o = g.linear(ctx, p.o.w, p.o.b)?;
        if let Some(dr) = dropout.as_deref_mut() {
            o = dr.apply(g, o)?;
        }
        let x = g.add(x, o)?;
        let f = g.layer_norm(x, p.ln_ffn.gain, p.ln_ffn.bias)?;
        let h = g.linear(f, p.ffn_in.w, p.ffn_in.b)?;
        let h = g.gelu(h);
        let mut h = g.linear(h, p.ffn_out.w, p.ffn_out.b)?;
        if let Some(dr) = dropout {
            h = dr.apply(g, h)?;
        }
        Ok(g.add(x, h)?)
    }

    /// Token-embedding extractor: sinusoidal token-index queries attend to
    /// the frames of their own span only. Returns `(context, output)` nodes.
    pub fn extract_tae_graph(
        &self,
        g: &mut Graph,
        frame_out: NodeId,
        boundaries: &SegmentBoundaries,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let frames = g.value(frame_out).rows();
        if boundaries.frames() != frames {
            return Err(ModelError::BoundaryMismatch {
                boundary_frames: boundaries.frames(),
                frames,
            });
        }
        let p = &self.layout.taee;
        let tokens = boundaries.len();
        let queries = g.input(sinusoidal_positions(tokens, self.config.model_dim));
        let q = g.linear(queries, p.q.w, p.q.b)?;
        let k = g.linear(frame_out, p.k.w, p.k.b)?;
        let v = g.linear(frame_out, p.v.w, p.v.b)?;
        let mask = AttnMask::from_spans(boundaries.spans(), frames);
        let ctx = g.attention(q, k, v, self.config.taee_heads, Some(&mask))?;
        let f = g.layer_norm(ctx, p.ln.gain, p.ln.bias)?;
        let h = g.linear(f, p.ffn_in.w, p.ffn_in.b)?;
        let h = g.gelu(h);
        let h = g.linear(h, p.ffn_out.w, p.ffn_out.b)?;
        let h = g.add(ctx, h)?;
        let out = g.linear(h, p.proj.w, p.proj.b)?;
        Ok((ctx, out))
    }

    /// Shared CTC projection (logits over blank + vocabulary).
    pub fn ctc_logits_graph(&self, g: &mut Graph, frame_out: NodeId) -> Result<NodeId, ModelError> {
        Ok(g.linear(frame_out, self.layout.ctc_head.w, self.layout.ctc_head.b)?)
    }

    /// Token-classification logits over the vocabulary (no blank).
    pub fn ce_logits_graph(&self, g: &mut Graph, token_out: NodeId) -> Result<NodeId, ModelError> {
        Ok(g.linear(token_out, self.layout.ce_head.w, self.layout.ce_head.b)?)
    }

    // ---- tensor-level inference -----------------------------------------

    pub fn conv_frontend(&self, features: &Tensor) -> Result<HiddenFeatures, ModelError> {
        let mut g = Graph::new(&self.params);
        let h = self.frontend_graph(&mut g, features)?;
        Ok(HiddenFeatures(g.value(h).clone()))
    }

    /// Accepts an externally computed `H` in place of the frontend.
    pub fn external_hidden(&self, hidden: Tensor) -> Result<HiddenFeatures, ModelError> {
        if hidden.rank() != 2 || hidden.cols() != self.config.model_dim {
            return Err(NumericsError::Shape(format!(
                "external hidden features {:?}, expected [T, {}]",
                hidden.dims(),
                self.config.model_dim
            ))
            .into());
        }
        Ok(HiddenFeatures(hidden))
    }

    pub fn encode_pass1(&self, hidden: &HiddenFeatures) -> Result<EncoderOutput, ModelError> {
        self.encode_pass2(
            hidden,
            &TokenAcousticEmbeddings::empty(self.config.model_dim),
        )
    }

    pub fn encode_pass2(
        &self,
        hidden: &HiddenFeatures,
        tae: &TokenAcousticEmbeddings,
    ) -> Result<EncoderOutput, ModelError> {
        self.encode_tensors(hidden, tae, false)
    }

    /// Second pass with frame↔token attention blocked.
    pub fn encode_pass2_isolated(
        &self,
        hidden: &HiddenFeatures,
        tae: &TokenAcousticEmbeddings,
    ) -> Result<EncoderOutput, ModelError> {
        self.encode_tensors(hidden, tae, true)
    }

    fn encode_tensors(
        &self,
        hidden: &HiddenFeatures,
        tae: &TokenAcousticEmbeddings,
        isolate: bool,
    ) -> Result<EncoderOutput, ModelError> {
        let mut g = Graph::new(&self.params);
        let h = g.input(hidden.0.clone());
        let t = (!tae.is_empty()).then(|| g.input(tae.values.clone()));
        let out = self.encode_graph(&mut g, h, t, isolate, None)?;
        let token_out = match out.token_out {
            Some(n) => g.value(n).clone(),
            None => Tensor::zeros(&[0, self.config.model_dim]),
        };
        Ok(EncoderOutput {
            frame_out: g.value(out.frame_out).clone(),
            token_out,
        })
    }

    pub fn extract_tae(
        &self,
        frame_out: &Tensor,
        boundaries: &SegmentBoundaries,
    ) -> Result<TokenAcousticEmbeddings, ModelError> {
        Ok(self.extract_tae_traced(frame_out, boundaries)?.output)
    }

    pub fn extract_tae_traced(
        &self,
        frame_out: &Tensor,
        boundaries: &SegmentBoundaries,
    ) -> Result<TaeTrace, ModelError> {
        let mut g = Graph::new(&self.params);
        let f = g.input(frame_out.clone());
        let (ctx, out) = self.extract_tae_graph(&mut g, f, boundaries)?;
        Ok(TaeTrace {
            context: g.value(ctx).clone(),
            output: TokenAcousticEmbeddings {
                values: g.value(out).clone(),
                boundaries: Some(boundaries.clone()),
            },
        })
    }

    pub fn ctc_head(&self, frame_out: &Tensor) -> Result<LogProbLattice, ModelError> {
        let mut g = Graph::new(&self.params);
        let f = g.input(frame_out.clone());
        let z = self.ctc_logits_graph(&mut g, f)?;
        Ok(LogProbLattice::from_logits(g.value(z))?)
    }

    /// Per-token log-probabilities over the vocabulary, `[U, V]`.
    pub fn ce_head(&self, token_out: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(&self.params);
        let t = g.input(token_out.clone());
        let z = self.ce_logits_graph(&mut g, t)?;
        Ok(crate::numerics::kernels::log_softmax_rows(g.value(z))?)
    }
}
