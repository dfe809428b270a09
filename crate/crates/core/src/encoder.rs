//! Transformer encoder over ROI connection profiles.
//!
//! Each connectome row is one token of width V, so no input projection is
//! needed. Blocks are pre-norm residual: `u = h + MHSA(LN(h))`,
//! `out = u + FFN(LN(u))`, with per-head scaled dot-product attention and the
//! heads concatenated then projected. A shared linear readout maps every token
//! to D features, concatenated in ROI order into the D*V subject embedding.

use crate::connectome::Connectome;
use crate::mat::Mat;
use crate::numerics::{self as nx, NumericsError, Real, Tensor};
use crate::ssl::MaskPlan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gaussian std-dev for projection and embedding init.
pub const INIT_STD: f64 = 0.02;

/// Version tag of the canonical parameter enumeration (checkpoint contract).
pub const PARAM_ORDER_VERSION: &str = "params-v1";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("mask index {index} out of range for {v} ROIs")]
    MaskIndex { index: usize, v: usize },
    #[error("input is {got_rows}x{got_cols}, expected {v}x{v}")]
    InputShape { got_rows: usize, got_cols: usize, v: usize },
    #[error("attention heatmap needs a non-empty cohort")]
    EmptyCohort,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub v_rois: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub readout_dim: usize,
    pub mask_ratio: f64,
}

impl EncoderConfig {
    /// Desk-scale default used by tests and `gradcheck`.
    pub fn tiny() -> Self {
        EncoderConfig {
            v_rois: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            readout_dim: 4,
            mask_ratio: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(EncoderError::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.v_rois % self.n_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "v_rois ({}) must be divisible by n_heads ({})",
                self.v_rois, self.n_heads
            )));
        }
        if self.v_rois < 2 {
            return Err(EncoderError::InvalidConfig("v_rois must be >= 2".into()));
        }
        if self.readout_dim == 0 {
            return Err(EncoderError::InvalidConfig("readout_dim must be >= 1".into()));
        }
        if self.ffn_dim == 0 {
            return Err(EncoderError::InvalidConfig("ffn_dim must be >= 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(EncoderError::InvalidConfig(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.v_rois / self.n_heads
    }

    /// Length of the readout embedding, D*V.
    pub fn embedding_len(&self) -> usize {
        self.readout_dim * self.v_rois
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let v = self.v_rois;
        let f = self.ffn_dim;
        let d = self.readout_dim;
        let per_layer = 3 * v * v          // per-head Q/K/V stacks sum to 3*V*V
            + v * v                        // output projection
            + 2 * (2 * v)                  // two layer norms, gain + bias
            + v * f + f                    // FFN in
            + f * v + v; // FFN out
        self.n_layers * per_layer
            + v * v                        // positional table
            + v                            // mask embedding
            + v * d + d // readout
    }
}

/// Name, shape, and weight-decay exemption of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Layer-norm gains/biases and the mask/positional embeddings skip decay.
    pub decay_exempt: bool,
}

pub struct LayerState<E: Real> {
    pub w_q: Vec<Tensor<E>>,
    pub w_k: Vec<Tensor<E>>,
    pub w_v: Vec<Tensor<E>>,
    pub w_o: Tensor<E>,
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub ffn_w1: Tensor<E>,
    pub ffn_b1: Tensor<E>,
    pub ffn_w2: Tensor<E>,
    pub ffn_b2: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
}

/// All learnable encoder parameters, enumerated in a fixed canonical order.
pub struct EncoderState<E: Real> {
    pub config: EncoderConfig,
    pub layers: Vec<LayerState<E>>,
    pub pos_embedding: Tensor<E>,
    pub mask_embedding: Tensor<E>,
    pub readout_w: Tensor<E>,
    pub readout_b: Tensor<E>,
}

fn gaussian<E: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<E> {
    (0..rows * cols)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            E::from_f64(g * std)
        })
        .collect()
}

fn leaf<E: Real>(rows: usize, cols: usize, values: Vec<E>, grad: bool) -> Tensor<E> {
    Tensor::leaf(rows, cols, values, grad)
}

impl<E: Real> EncoderState<E> {
    /// Fresh state: Gaussian(0, 0.02^2) projections and embeddings, zero
    /// biases, unit layer-norm gains. Sampling follows canonical order.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = config.v_rois;
        let dk = config.head_dim();
        let f = config.ffn_dim;
        let d = config.readout_dim;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut w_q = Vec::with_capacity(config.n_heads);
            let mut w_k = Vec::with_capacity(config.n_heads);
            let mut w_v = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                w_q.push(leaf(v, dk, gaussian(&mut rng, v, dk, INIT_STD), true));
                w_k.push(leaf(v, dk, gaussian(&mut rng, v, dk, INIT_STD), true));
                w_v.push(leaf(v, dk, gaussian(&mut rng, v, dk, INIT_STD), true));
            }
            layers.push(LayerState {
                w_q,
                w_k,
                w_v,
                w_o: leaf(v, v, gaussian(&mut rng, v, v, INIT_STD), true),
                ln1_gain: leaf(1, v, vec![E::one(); v], true),
                ln1_bias: leaf(1, v, vec![E::zero(); v], true),
                ffn_w1: leaf(v, f, gaussian(&mut rng, v, f, INIT_STD), true),
                ffn_b1: leaf(1, f, vec![E::zero(); f], true),
                ffn_w2: leaf(f, v, gaussian(&mut rng, f, v, INIT_STD), true),
                ffn_b2: leaf(1, v, vec![E::zero(); v], true),
                ln2_gain: leaf(1, v, vec![E::one(); v], true),
                ln2_bias: leaf(1, v, vec![E::zero(); v], true),
            });
        }
        Ok(EncoderState {
            config: config.clone(),
            layers,
            pos_embedding: leaf(v, v, gaussian(&mut rng, v, v, INIT_STD), true),
            mask_embedding: leaf(1, v, gaussian(&mut rng, 1, v, INIT_STD), true),
            readout_w: leaf(v, d, gaussian(&mut rng, v, d, INIT_STD), true),
            readout_b: leaf(1, d, vec![E::zero(); d], true),
        })
    }

    /// Canonical enumeration: layers in order (per head q/k/v, then output
    /// projection, norms, FFN), then positional table, mask embedding, readout.
    pub fn params(&self) -> Vec<(ParamMeta, &Tensor<E>)> {
        let mut out = Vec::new();
        let meta = |name: String, t: &Tensor<E>, exempt: bool| ParamMeta {
            name,
            rows: t.rows(),
            cols: t.cols(),
            decay_exempt: exempt,
        };
        for (l, layer) in self.layers.iter().enumerate() {
            for c in 0..layer.w_q.len() {
                out.push((meta(format!("layer{l}.head{c}.w_q"), &layer.w_q[c], false), &layer.w_q[c]));
                out.push((meta(format!("layer{l}.head{c}.w_k"), &layer.w_k[c], false), &layer.w_k[c]));
                out.push((meta(format!("layer{l}.head{c}.w_v"), &layer.w_v[c], false), &layer.w_v[c]));
            }
            out.push((meta(format!("layer{l}.w_o"), &layer.w_o, false), &layer.w_o));
            out.push((meta(format!("layer{l}.ln1.gain"), &layer.ln1_gain, true), &layer.ln1_gain));
            out.push((meta(format!("layer{l}.ln1.bias"), &layer.ln1_bias, true), &layer.ln1_bias));
            out.push((meta(format!("layer{l}.ffn.w1"), &layer.ffn_w1, false), &layer.ffn_w1));
            out.push((meta(format!("layer{l}.ffn.b1"), &layer.ffn_b1, false), &layer.ffn_b1));
            out.push((meta(format!("layer{l}.ffn.w2"), &layer.ffn_w2, false), &layer.ffn_w2));
            out.push((meta(format!("layer{l}.ffn.b2"), &layer.ffn_b2, false), &layer.ffn_b2));
            out.push((meta(format!("layer{l}.ln2.gain"), &layer.ln2_gain, true), &layer.ln2_gain));
            out.push((meta(format!("layer{l}.ln2.bias"), &layer.ln2_bias, true), &layer.ln2_bias));
        }
        out.push((meta("pos_embedding".into(), &self.pos_embedding, true), &self.pos_embedding));
        out.push((meta("mask_embedding".into(), &self.mask_embedding, true), &self.mask_embedding));
        out.push((meta("readout.w".into(), &self.readout_w, false), &self.readout_w));
        out.push((meta("readout.b".into(), &self.readout_b, false), &self.readout_b));
        out
    }

    /// Mutable slots in the same canonical order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = Vec::new();
        for layer in self.layers.iter_mut() {
            for ((q, k), v) in layer.w_q.iter_mut().zip(layer.w_k.iter_mut()).zip(layer.w_v.iter_mut()) {
                out.push(q);
                out.push(k);
                out.push(v);
            }
            out.push(&mut layer.w_o);
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.ffn_w1);
            out.push(&mut layer.ffn_b1);
            out.push(&mut layer.ffn_w2);
            out.push(&mut layer.ffn_b2);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
        }
        out.push(&mut self.pos_embedding);
        out.push(&mut self.mask_embedding);
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Detached deep copy with `requires_grad = false` (target network).
    pub fn detached_copy(&self) -> Self {
        let copy_t = |t: &Tensor<E>| Tensor::constant(t.rows(), t.cols(), t.values().to_vec());
        EncoderState {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    w_q: l.w_q.iter().map(&copy_t).collect(),
                    w_k: l.w_k.iter().map(&copy_t).collect(),
                    w_v: l.w_v.iter().map(&copy_t).collect(),
                    w_o: copy_t(&l.w_o),
                    ln1_gain: copy_t(&l.ln1_gain),
                    ln1_bias: copy_t(&l.ln1_bias),
                    ffn_w1: copy_t(&l.ffn_w1),
                    ffn_b1: copy_t(&l.ffn_b1),
                    ffn_w2: copy_t(&l.ffn_w2),
                    ffn_b2: copy_t(&l.ffn_b2),
                    ln2_gain: copy_t(&l.ln2_gain),
                    ln2_bias: copy_t(&l.ln2_bias),
                })
                .collect(),
            pos_embedding: copy_t(&self.pos_embedding),
            mask_embedding: copy_t(&self.mask_embedding),
            readout_w: copy_t(&self.readout_w),
            readout_b: copy_t(&self.readout_b),
        }
    }

    /// Token matrix H^0: connection profiles plus positional embeddings, with
    /// masked rows replaced by the learnable mask embedding before mixing.
    pub fn embed_tokens(&self, x: &Tensor<E>, mask: Option<&MaskPlan>) -> Result<Tensor<E>> {
        let v = self.config.v_rois;
        if x.rows() != v || x.cols() != v {
            return Err(EncoderError::InputShape { got_rows: x.rows(), got_cols: x.cols(), v });
        }
        let base = match mask {
            Some(plan) => {
                for &i in &plan.indices {
                    if i >= v {
                        return Err(EncoderError::MaskIndex { index: i, v });
                    }
                }
                // broadcast the 1xV mask embedding to one row per masked ROI
                let rep = nx::gather_rows(&self.mask_embedding, &vec![0; plan.indices.len()])?;
                nx::scatter_replace_rows(x, &plan.indices, &rep)?
            }
            None => x.clone(),
        };
        Ok(nx::add(&base, &self.pos_embedding)?)
    }

    /// One pre-norm residual block. When `capture` is set, the per-head
    /// attention matrices are recorded as plain values.
    pub fn transformer_block(
        &self,
        layer: usize,
        h: &Tensor<E>,
        mut capture: Option<&mut Vec<Mat>>,
    ) -> Result<Tensor<E>> {
        let lp = &self.layers[layer];
        let dk = self.config.head_dim();
        let inv_sqrt_dk = E::from_f64(1.0 / (dk as f64).sqrt());

        let n1 = nx::layer_norm(h, &lp.ln1_gain, &lp.ln1_bias)?;
        let mut head_outputs = Vec::with_capacity(self.config.n_heads);
        for c in 0..self.config.n_heads {
            let q = nx::matmul(&n1, &lp.w_q[c])?;
            let k = nx::matmul(&n1, &lp.w_k[c])?;
            let v = nx::matmul(&n1, &lp.w_v[c])?;
            let scores = nx::scale(&nx::matmul(&q, &nx::transpose(&k)?)?, inv_sqrt_dk)?;
            let attn = nx::row_softmax(&scores)?;
            if let Some(maps) = capture.as_deref_mut() {
                maps.push(attn.to_mat());
            }
            head_outputs.push(nx::matmul(&attn, &v)?);
        }
        let concat = nx::concat_cols(&head_outputs)?;
        let mhsa = nx::matmul(&concat, &lp.w_o)?;
        let u = nx::add(h, &mhsa)?;

        let n2 = nx::layer_norm(&u, &lp.ln2_gain, &lp.ln2_bias)?;
        let f1 = nx::gelu(&nx::add(&nx::matmul(&n2, &lp.ffn_w1)?, &lp.ffn_b1)?)?;
        let f2 = nx::add(&nx::matmul(&f1, &lp.ffn_w2)?, &lp.ffn_b2)?;
        Ok(nx::add(&u, &f2)?)
    }

    /// Full forward from an input token tensor (for gradient tests that need a
    /// differentiable input).
    pub fn encode_tensor(
        &self,
        x: &Tensor<E>,
        mask: Option<&MaskPlan>,
        capture_attention: bool,
    ) -> Result<EncoderOutput<E>> {
        let mut h = self.embed_tokens(x, mask)?;
        let mut attention = if capture_attention { Some(Vec::new()) } else { None };
        for l in 0..self.config.n_layers {
            if let Some(layers) = attention.as_mut() {
                let mut maps = Vec::with_capacity(self.config.n_heads);
                h = self.transformer_block(l, &h, Some(&mut maps))?;
                layers.push(maps);
            } else {
                h = self.transformer_block(l, &h, None)?;
            }
        }
        Ok(EncoderOutput { tokens: h, attention })
    }

    /// Encode a connectome (stateless; repeated calls are identical).
    pub fn encode(
        &self,
        x: &Connectome,
        mask: Option<&MaskPlan>,
        capture_attention: bool,
    ) -> Result<EncoderOutput<E>> {
        self.encode_tensor(&Tensor::from_mat(&x.matrix), mask, capture_attention)
    }

    /// Shared linear map V -> D per token, concatenated in ROI order into a
    /// `1 x (D*V)` embedding.
    pub fn readout(&self, output: &EncoderOutput<E>) -> Result<Tensor<E>> {
        let proj = nx::add(&nx::matmul(&output.tokens, &self.readout_w)?, &self.readout_b)?;
        let rows: Vec<Tensor<E>> =
            (0..proj.rows()).map(|i| nx::gather_rows(&proj, &[i])).collect::<nx::Result<_>>()?;
        Ok(nx::concat_cols(&rows)?)
    }
}

/// Final hidden states and, when requested, the attention stack.
pub struct EncoderOutput<E: Real> {
    /// V x V matrix of encoded connection profiles.
    pub tokens: Tensor<E>,
    /// `attention[layer][head]` with rows summing to 1; captured on request.
    pub attention: Option<Vec<Vec<Mat>>>,
}

/// Which layers to average for the attention heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    First,
    Last,
    Mean,
}

impl std::str::FromStr for LayerSel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "first" => Ok(LayerSel::First),
            "last" => Ok(LayerSel::Last),
            "mean" => Ok(LayerSel::Mean),
            other => Err(format!("unknown layer selector {other:?}; expected first, last or mean")),
        }
    }
}

/// Attention averaged over heads, subjects and (for `Mean`) layers, then
/// min-max normalized into [0, 1]. A degenerate range (< 1e-12) maps to all
/// zeros.
pub fn attention_heatmap<E: Real>(
    state: &EncoderState<E>,
    cohort: &[Connectome],
    layer_sel: LayerSel,
) -> Result<Mat> {
    if cohort.is_empty() {
        return Err(EncoderError::EmptyCohort);
    }
    let v = state.config.v_rois;
    let mut acc = Mat::zeros(v, v);
    let mut count = 0usize;
    for x in cohort {
        let out = state.encode(x, None, true)?;
        let layers = out.attention.expect("attention requested");
        let selected: Vec<&Vec<Mat>> = match layer_sel {
            LayerSel::First => vec![&layers[0]],
            LayerSel::Last => vec![&layers[layers.len() - 1]],
            LayerSel::Mean => layers.iter().collect(),
        };
        for heads in selected {
            for map in heads {
                for i in 0..v {
                    for j in 0..v {
                        acc.set(i, j, acc.get(i, j) + map.get(i, j));
                    }
                }
                count += 1;
            }
        }
    }
    let inv = 1.0 / count as f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..v {
        for j in 0..v {
            let m = acc.get(i, j) * inv;
            acc.set(i, j, m);
            lo = lo.min(m);
            hi = hi.max(m);
        }
    }
    let range = hi - lo;
    let mut out = Mat::zeros(v, v);
    if range >= 1e-12 {
        for i in 0..v {
            for j in 0..v {
                out.set(i, j, (acc.get(i, j) - lo) / range);
            }
        }
    }
    Ok(out)
}
