//! A configurable minimal Transformer: token embedding, pre-LayerNorm,
//! multihead self-attention with rotary position encoding, optional MLP
//! sublayer, residual stream, and an untied linear classifier.
//!
//! Parameters live in one flat buffer with a named tensor layout, which keeps
//! the optimizer, gradient buffers, finite-difference checks, and the
//! checkpoint format all trivially aligned.

pub mod backprop;
pub mod checkpoint;
pub(crate) mod kernels;
pub mod rope;

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Token;
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::Rng;

use kernels::{causal_mix, causal_scores, matmul, matmul_abt, softmax_prefix, transposed};
pub use rope::{rope_matrix, RopeTable};

/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("head not found: layer {layer}, head {head}")]
    HeadNotFound { layer: usize, head: usize },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub t_max: usize,
    pub rope_theta: f64,
    pub use_mlp: bool,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    /// Apply dropout to attention weights (in addition to residual
    /// additions). With `false`, the rate applies to residual additions only.
    pub attn_dropout: bool,
    pub final_ln: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::default_2l1h()
    }
}

impl ModelConfig {
    /// The default 2-layer 1-head attention-only model the training-dynamics
    /// experiments use: `d = 64`, vocabulary 64, context 64, RoPE theta 1e4.
    pub fn default_2l1h() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 1,
            t_max: 64,
            rope_theta: 10_000.0,
            use_mlp: false,
            mlp_hidden: 256,
            dropout_rate: 0.1,
            attn_dropout: true,
            final_ln: true,
            init_std: 0.02,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// True when `other` has the same parameter layout (shapes and tensor
    /// set); training-behavior flags such as dropout may differ.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.vocab == other.vocab
            && self.d_model == other.d_model
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.final_ln == other.final_ln
            && self.use_mlp == other.use_mlp
            && (!self.use_mlp || self.mlp_hidden == other.mlp_hidden)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::InvalidConfig("zero-size dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "head dimension {} must be even for RoPE",
                self.d_head()
            )));
        }
        if self.t_max < 2 {
            return Err(ModelError::InvalidConfig("t_max must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must lie in [0, 1)".into()));
        }
        if self.use_mlp && self.mlp_hidden == 0 {
            return Err(ModelError::InvalidConfig("mlp_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Identifies one attention head. Ordering is lexicographic (layer, head),
/// which is also the ranking tie-break everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.layer, self.head)
    }
}

/// Shape and position of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the buffer.
    pub offset: usize,
    /// Length in elements.
    pub len: usize,
}

#[derive(Debug, Clone)]
struct HeadOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct MlpOffsets {
    ln_gain: usize,
    ln_bias: usize,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln_gain: usize,
    ln_bias: usize,
    heads: Vec<HeadOffsets>,
    mlp: Option<MlpOffsets>,
}

/// Flat-buffer layout derived from a config. The tensor order is part of the
/// checkpoint format and must not change.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    embed: usize,
    layers: Vec<LayerOffsets>,
    final_ln: Option<(usize, usize)>,
    w_out: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, dh, v) = (cfg.d_model, cfg.d_head(), cfg.vocab);
        let mut specs = Vec::new();
        let mut at = 0usize;
        let mut push = |specs: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let offset = at;
            specs.push(TensorSpec { name, shape, offset, len });
            at += len;
            offset
        };

        let embed = push(&mut specs, "embed".into(), vec![v, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let ln_gain = push(&mut specs, format!("layers.{l}.ln.gain"), vec![d]);
            let ln_bias = push(&mut specs, format!("layers.{l}.ln.bias"), vec![d]);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let wq = push(&mut specs, format!("layers.{l}.heads.{h}.wq"), vec![d, dh]);
                let wk = push(&mut specs, format!("layers.{l}.heads.{h}.wk"), vec![d, dh]);
                let wv = push(&mut specs, format!("layers.{l}.heads.{h}.wv"), vec![d, dh]);
                let wo = push(&mut specs, format!("layers.{l}.heads.{h}.wo"), vec![d, dh]);
                heads.push(HeadOffsets { wq, wk, wv, wo });
            }
            let mlp = cfg.use_mlp.then(|| {
                let ln_gain = push(&mut specs, format!("layers.{l}.mlp.ln.gain"), vec![d]);
                let ln_bias = push(&mut specs, format!("layers.{l}.mlp.ln.bias"), vec![d]);
                let w1 = push(&mut specs, format!("layers.{l}.mlp.w1"), vec![d, cfg.mlp_hidden]);
                let w2 = push(&mut specs, format!("layers.{l}.mlp.w2"), vec![cfg.mlp_hidden, d]);
                MlpOffsets { ln_gain, ln_bias, w1, w2 }
            });
            layers.push(LayerOffsets { ln_gain, ln_bias, heads, mlp });
        }
        let final_ln = cfg.final_ln.then(|| {
            let g = push(&mut specs, "final_ln.gain".into(), vec![d]);
            let b = push(&mut specs, "final_ln.bias".into(), vec![d]);
            (g, b)
        });
        let w_out = push(&mut specs, "w_out".into(), vec![v, d]);
        Self { specs, total: at, embed, layers, final_ln, w_out }
    }
}

/// All trainable tensors of the model, in one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelParameters<T> {
    pub config: ModelConfig,
    pub layout: Arc<ParamLayout>,
    pub data: Vec<T>,
    rope: Arc<RopeTable<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// All weights i.i.d. Gaussian with standard deviation `init_std`;
    /// LayerNorm gains 1 and biases 0.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        for spec in &layout.specs {
            let slot = &mut data[spec.offset..spec.offset + spec.len];
            if spec.name.ends_with("ln.gain") {
                slot.fill(T::one());
            } else if spec.name.ends_with("ln.bias") {
                slot.fill(T::zero());
            } else {
                for v in slot.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = T::from_f64(g * config.init_std);
                }
            }
        }
        let rope = Arc::new(RopeTable::new(config.d_head(), config.rope_theta, config.t_max)?);
        Ok(Self { config, layout: Arc::new(layout), data, rope })
    }

    /// Wraps an existing flat buffer (checkpoint load, casts).
    pub fn from_flat(config: ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total {
            return Err(ModelError::InvalidInput(format!(
                "flat buffer has {} elements, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        let rope = Arc::new(RopeTable::new(config.d_head(), config.rope_theta, config.t_max)?);
        Ok(Self { config, layout: Arc::new(layout), data, rope })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn rope(&self) -> &RopeTable<T> {
        &self.rope
    }

    pub fn to_f64(&self) -> ModelParameters<f64> {
        ModelParameters::from_flat(
            self.config.clone(),
            self.data.iter().map(|&v| v.as_f64()).collect(),
        )
        .expect("shape-preserving cast")
    }

    fn head(&self, id: HeadId) -> Result<&HeadOffsets, ModelError> {
        self.layout
            .layers
            .get(id.layer)
            .and_then(|l| l.heads.get(id.head))
            .ok_or(ModelError::HeadNotFound { layer: id.layer, head: id.head })
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.config.n_layers)
            .flat_map(|l| (0..self.config.n_heads).map(move |h| HeadId { layer: l, head: h }))
            .collect()
    }

    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.data[offset..offset + len]
    }

    pub fn embed(&self) -> &[T] {
        self.slice(self.layout.embed, self.config.vocab * self.config.d_model)
    }

    pub fn w_out(&self) -> &[T] {
        self.slice(self.layout.w_out, self.config.vocab * self.config.d_model)
    }

    pub fn ln_gain(&self, layer: usize) -> &[T] {
        self.slice(self.layout.layers[layer].ln_gain, self.config.d_model)
    }

    pub fn ln_bias(&self, layer: usize) -> &[T] {
        self.slice(self.layout.layers[layer].ln_bias, self.config.d_model)
    }

    pub fn wq(&self, id: HeadId) -> Result<&[T], ModelError> {
        let off = self.head(id)?.wq;
        Ok(self.slice(off, self.config.d_model * self.config.d_head()))
    }

    pub fn wk(&self, id: HeadId) -> Result<&[T], ModelError> {
        let off = self.head(id)?.wk;
        Ok(self.slice(off, self.config.d_model * self.config.d_head()))
    }

    pub fn wv(&self, id: HeadId) -> Result<&[T], ModelError> {
        let off = self.head(id)?.wv;
        Ok(self.slice(off, self.config.d_model * self.config.d_head()))
    }

    pub fn wo(&self, id: HeadId) -> Result<&[T], ModelError> {
        let off = self.head(id)?.wo;
        Ok(self.slice(off, self.config.d_model * self.config.d_head()))
    }

    /// Overwrites one head tensor; used by the intervention engine.
    pub(crate) fn set_head_tensor(
        &mut self,
        id: HeadId,
        which: HeadTensor,
        values: &[T],
    ) -> Result<(), ModelError> {
        let len = self.config.d_model * self.config.d_head();
        if values.len() != len {
            return Err(ModelError::InvalidInput("tensor length mismatch".into()));
        }
        let off = {
            let h = self.head(id)?;
            match which {
                HeadTensor::Wq => h.wq,
                HeadTensor::Wk => h.wk,
                HeadTensor::Wv => h.wv,
                HeadTensor::Wo => h.wo,
            }
        };
        self.data[off..off + len].copy_from_slice(values);
        Ok(())
    }

    /// The effective query-key bilinear form `wq * R_{delta_t} * wk^T / sqrt(d_head)`
    /// as a dense `d x d` matrix in f64. `delta_t = 0` is the value every
    /// training-dynamics measure uses.
    pub fn extract_qk(&self, id: HeadId, delta_t: usize) -> Result<Matrix, ModelError> {
        let (d, dh) = (self.config.d_model, self.config.d_head());
        let wq = self.wq(id)?;
        let wk = self.wk(id)?;
        let mq = Matrix::from_fn(d, dh, |i, j| wq[i * dh + j].as_f64());
        let mk = Matrix::from_fn(d, dh, |i, j| wk[i * dh + j].as_f64());
        let r = rope_matrix(dh, self.config.rope_theta, delta_t)?;
        Ok(mq.matmul(&r).matmul(&mk.transpose()).scale(1.0 / (dh as f64).sqrt()))
    }

    /// The output-value circuit `wo * wv^T` as a dense `d x d` matrix in f64.
    pub fn extract_ov(&self, id: HeadId) -> Result<Matrix, ModelError> {
        let (d, dh) = (self.config.d_model, self.config.d_head());
        let wv = self.wv(id)?;
        let wo = self.wo(id)?;
        let mv = Matrix::from_fn(d, dh, |i, j| wv[i * dh + j].as_f64());
        let mo = Matrix::from_fn(d, dh, |i, j| wo[i * dh + j].as_f64());
        Ok(mo.matmul(&mv.transpose()))
    }

    /// Token embedding matrix as f64, for the token-matching measure.
    pub fn embed_matrix(&self) -> Matrix {
        let (v, d) = (self.config.vocab, self.config.d_model);
        let e = self.embed();
        Matrix::from_fn(v, d, |i, j| e[i * d + j].as_f64())
    }
}

pub(crate) enum HeadTensor {
    Wq,
    Wk,
    Wv,
    Wo,
}

/// Forward pass options.
pub struct ForwardOpts<'a> {
    pub capture_attention: bool,
    pub capture_hidden: bool,
    /// Heads whose attention matrix is forced to the zero matrix.
    pub head_mask: &'a [HeadId],
    pub train_mode: bool,
    pub dropout_rng: Option<&'a mut Rng>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self {
            capture_attention: false,
            capture_hidden: false,
            head_mask: &[],
            train_mode: false,
            dropout_rng: None,
        }
    }
}

impl ForwardOpts<'_> {
    pub fn capture() -> Self {
        Self { capture_attention: true, ..Default::default() }
    }
}

/// Logits plus optionally captured per-head attention matrices and per-layer
/// hidden states.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub t_len: usize,
    pub vocab: usize,
    /// `t_len x vocab`, row `t` scores the token at position `t + 1`.
    pub logits: Vec<T>,
    /// Per (layer, head): `t_len x t_len`, row-stochastic on the causal
    /// prefix. Zero matrix for masked heads.
    pub attentions: Option<Vec<Vec<T>>>,
    /// Per layer: `t_len x d` residual stream after the layer.
    pub hiddens: Option<Vec<Vec<T>>>,
    n_heads: usize,
}

impl<T: Real> ForwardTrace<T> {
    pub fn attention(&self, id: HeadId) -> Option<&[T]> {
        self.attentions
            .as_ref()
            .map(|a| a[id.layer * self.n_heads + id.head].as_slice())
    }

    pub fn logits_row(&self, t: usize) -> &[T] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }

    /// Greedy prediction for the token at position `t + 1`, lowest index wins
    /// ties.
    pub fn argmax(&self, t: usize) -> Token {
        let row = self.logits_row(t);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as Token
    }

    /// Softmax probabilities for the token at position `t + 1`, in f64.
    pub fn probs_row(&self, t: usize) -> Vec<f64> {
        let row = self.logits_row(t);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct HeadStash<T> {
    pub masked: bool,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Post-softmax, pre-dropout attention; `t_len x t_len` row-major.
    pub attn: Vec<T>,
    /// Dropout multipliers on causal attention entries; empty when not training.
    pub amask: Vec<T>,
    /// `t_len x d_head`, rows are dropped-attention-weighted value sums.
    pub ctx: Vec<T>,
}

pub(crate) struct MlpStash<T> {
    pub n: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub out_mask: Vec<T>,
}

pub(crate) struct LayerStash<T> {
    pub n: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
    pub heads: Vec<HeadStash<T>>,
    pub msa_mask: Vec<T>,
    pub mlp: Option<MlpStash<T>>,
}

pub(crate) struct Stash<T> {
    pub layers: Vec<LayerStash<T>>,
    pub final_ln: Option<(Vec<T>, Vec<T>)>,
    /// Input to the classifier (`t_len x d`).
    pub final_x: Vec<T>,
    pub logits: Vec<T>,
}

/// LayerNorm over the feature axis, returning the normalized pre-affine
/// values and inverse standard deviations alongside the affine output.
fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    t_len: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut n = vec![T::zero(); t_len * d];
    let mut inv_stds = Vec::with_capacity(t_len);
    let mut out = vec![T::zero(); t_len * d];
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        inv_stds.push(inv_std);
        let nrow = &mut n[t * d..(t + 1) * d];
        let orow = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            let nv = (row[i] - mean) * inv_std;
            nrow[i] = nv;
            orow[i] = gain[i] * nv + bias[i];
        }
    }
    (n, inv_stds, out)
}

/// Draws a dropout multiplier: `1/keep` with probability `keep`, else 0.
#[inline]
fn dropout_mult<T: Real>(rng: &mut Rng, keep: f64) -> T {
    if rng.gen::<f64>() < keep {
        T::from_f64(1.0 / keep)
    } else {
        T::zero()
    }
}

/// Runs the model on a token sequence. With `capture_attention` the trace
/// keeps every head's attention matrix; with `capture_hidden` it keeps each
/// layer's residual stream. Dropout applies only in `train_mode` with a
/// generator supplied, to attention weights and to residual additions.
pub fn forward<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
    opts: ForwardOpts<'_>,
) -> Result<ForwardTrace<T>, ModelError> {
    let (trace, _) = forward_impl(params, tokens, opts, false)?;
    Ok(trace)
}

pub(crate) fn forward_impl<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
    mut opts: ForwardOpts<'_>,
    want_stash: bool,
) -> Result<(ForwardTrace<T>, Option<Stash<T>>), ModelError> {
    let cfg = &params.config;
    let (d, dh, t_len) = (cfg.d_model, cfg.d_head(), tokens.len());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    if t_len == 0 {
        return Err(ModelError::InvalidInput("empty token sequence".into()));
    }
    if t_len > cfg.t_max {
        return Err(ModelError::InvalidInput(format!(
            "sequence length {} exceeds t_max {}",
            t_len, cfg.t_max
        )));
    }
    for &tk in tokens {
        if tk as usize >= cfg.vocab {
            return Err(ModelError::InvalidInput(format!(
                "token id {tk} out of range (vocab {})",
                cfg.vocab
            )));
        }
    }
    for &m in opts.head_mask {
        params.head(m)?;
    }

    let keep = 1.0 - cfg.dropout_rate;
    let dropping = opts.train_mode && cfg.dropout_rate > 0.0 && opts.dropout_rng.is_some();
    let attn_dropping = dropping && cfg.attn_dropout;

    // Residual stream, initialized with token embeddings.
    let mut x = vec![T::zero(); t_len * d];
    let embed = params.embed();
    for (t, &tk) in tokens.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(&embed[tk as usize * d..(tk as usize + 1) * d]);
    }

    let mut attn_capture: Option<Vec<Vec<T>>> =
        opts.capture_attention.then(|| Vec::with_capacity(cfg.n_layers * cfg.n_heads));
    let mut hidden_capture: Option<Vec<Vec<T>>> =
        opts.capture_hidden.then(|| Vec::with_capacity(cfg.n_layers));
    let mut stash_layers: Vec<LayerStash<T>> = Vec::new();

    for layer in 0..cfg.n_layers {
        let (n, inv_std, xhat) =
            layer_norm(&x, params.ln_gain(layer), params.ln_bias(layer), t_len, d);

        let mut msa_out = vec![T::zero(); t_len * d];
        let mut head_stashes: Vec<HeadStash<T>> = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let id = HeadId { layer, head };
            let masked = opts.head_mask.contains(&id);
            if masked {
                if let Some(cap) = attn_capture.as_mut() {
                    cap.push(vec![T::zero(); t_len * t_len]);
                }
                head_stashes.push(HeadStash {
                    masked: true,
                    q: Vec::new(),
                    k: Vec::new(),
                    v: Vec::new(),
                    attn: Vec::new(),
                    amask: Vec::new(),
                    ctx: Vec::new(),
                });
                continue;
            }

            let mut q = vec![T::zero(); t_len * dh];
            let mut k = vec![T::zero(); t_len * dh];
            let mut v = vec![T::zero(); t_len * dh];
            matmul(&mut q, &xhat, params.wq(id)?, t_len, d, dh);
            matmul(&mut k, &xhat, params.wk(id)?, t_len, d, dh);
            matmul(&mut v, &xhat, params.wv(id)?, t_len, d, dh);
            for t in 0..t_len {
                params.rope.rotate(&mut q[t * dh..(t + 1) * dh], t);
                params.rope.rotate(&mut k[t * dh..(t + 1) * dh], t);
            }

            // Causal attention: row t covers keys 0..=t.
            let mut attn = vec![T::zero(); t_len * t_len];
            let kt = transposed(&k, t_len, dh);
            causal_scores(&mut attn, &q, &kt, t_len, dh);
            for t in 0..t_len {
                let row = &mut attn[t * t_len..(t + 1) * t_len];
                for z in row[..=t].iter_mut() {
                    *z *= scale;
                }
                softmax_prefix(row, t + 1);
            }
            if let Some(cap) = attn_capture.as_mut() {
                cap.push(attn.clone());
            }

            // Attention dropout on causal entries, then context.
            let mut amask = Vec::new();
            let mut ctx = vec![T::zero(); t_len * dh];
            if attn_dropping {
                amask = vec![T::zero(); t_len * t_len];
                let rng = opts.dropout_rng.as_mut().unwrap();
                for t in 0..t_len {
                    for tp in 0..=t {
                        amask[t * t_len + tp] = dropout_mult(rng, keep);
                    }
                }
                let weff: Vec<T> =
                    attn.iter().zip(&amask).map(|(&a, &m)| a * m).collect();
                causal_mix(&mut ctx, &weff, &v, t_len, dh);
            } else {
                causal_mix(&mut ctx, &attn, &v, t_len, dh);
            }

            matmul_abt(&mut msa_out, &ctx, params.wo(id)?, t_len, dh, d);
            head_stashes.push(HeadStash { masked: false, q, k, v, attn, amask, ctx });
        }

        // Residual dropout on the attention sublayer output.
        let mut msa_mask = Vec::new();
        if dropping {
            let rng = opts.dropout_rng.as_mut().unwrap();
            msa_mask = (0..t_len * d).map(|_| dropout_mult::<T>(rng, keep)).collect();
            for ((xv, &m), &o) in x.iter_mut().zip(&msa_mask).zip(&msa_out) {
                *xv += m * o;
            }
        } else {
            for (xv, &o) in x.iter_mut().zip(&msa_out) {
                *xv += o;
            }
        }

        // Optional MLP sublayer with its own pre-LayerNorm.
        let mlp_stash = if cfg.use_mlp {
            let lofs = &params.layout.layers[layer];
            let m = lofs.mlp.as_ref().unwrap();
            let hidden = cfg.mlp_hidden;
            let gain = params.slice(m.ln_gain, d);
            let bias = params.slice(m.ln_bias, d);
            let (n2, inv2, xhat2) = layer_norm(&x, gain, bias, t_len, d);
            let w1 = params.slice(m.w1, d * hidden);
            let w2 = params.slice(m.w2, hidden * d);
            let mut pre = vec![T::zero(); t_len * hidden];
            matmul_abt(&mut pre, &xhat2, w2, t_len, d, hidden);
            let act: Vec<T> = pre.iter().map(|&p| if p > T::zero() { p } else { T::zero() }).collect();
            let mut out = vec![T::zero(); t_len * d];
            matmul_abt(&mut out, &act, w1, t_len, hidden, d);
            let mut out_mask = Vec::new();
            if dropping {
                let rng = opts.dropout_rng.as_mut().unwrap();
                out_mask = (0..t_len * d).map(|_| dropout_mult::<T>(rng, keep)).collect();
                for ((xv, &mk), &o) in x.iter_mut().zip(&out_mask).zip(&out) {
                    *xv += mk * o;
                }
            } else {
                for (xv, &o) in x.iter_mut().zip(&out) {
                    *xv += o;
                }
            }
            Some(MlpStash { n: n2, inv_std: inv2, xhat: xhat2, pre, act, out_mask })
        } else {
            None
        };

        if let Some(cap) = hidden_capture.as_mut() {
            cap.push(x.clone());
        }
        if want_stash {
            stash_layers.push(LayerStash { n, inv_std, xhat, heads: head_stashes, msa_mask, mlp: mlp_stash });
        }
    }

    // Final LayerNorm (config flag) and classifier.
    let (final_x, final_ln_stash) = if let Some((goff, boff)) = params.layout.final_ln {
        let gain = params.slice(goff, d);
        let bias = params.slice(boff, d);
        let (n, inv, xhat) = layer_norm(&x, gain, bias, t_len, d);
        (xhat, Some((n, inv)))
    } else {
        (x, None)
    };
    let mut logits = vec![T::zero(); t_len * cfg.vocab];
    matmul_abt(&mut logits, &final_x, params.w_out(), t_len, d, cfg.vocab);

    let trace = ForwardTrace {
        t_len,
        vocab: cfg.vocab,
        logits: logits.clone(),
        attentions: attn_capture,
        hiddens: hidden_capture,
        n_heads: cfg.n_heads,
    };
    let stash = want_stash.then(|| Stash {
        layers: stash_layers,
        final_ln: final_ln_stash,
        final_x,
        logits,
    });
    Ok((trace, stash))
}
