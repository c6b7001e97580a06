//! A small decoder-only transformer with hand-written reverse-mode
//! gradients.
//!
//! Architecture: learned token and position embeddings (positions restart
//! at each packed segment, so a packed example looks the same to the model
//! as an unpacked prompt), pre-norm residual blocks with multi-head
//! attention and a GELU feed-forward, a final layer norm, and an untied
//! output head. Attention visibility comes from the packed batch's
//! prefix-LM mask: bidirectional inside each segment's prefix, causal after
//! it, blocked across segments, and pad positions outside any segment are
//! skipped entirely.
//!
//! The logits that score the token at position `j` are computed from the
//! hidden state at `j - 1`, so a token is never conditioned on itself; the
//! first target token of a segment is predicted from the last prefix
//! position.
//!
//! Parameters are stored as f32 (the checkpoint format is f32) but all
//! arithmetic runs in f64, which keeps training runs reproducible and makes
//! the finite-difference gradient checks meaningful. Everything is
//! sequential and seed-driven: two calls with the same inputs produce
//! bit-identical results.

use crate::packer::{AttentionMask, PackedBatch, Segment};
use crate::tokenizer::TokenId;
use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} outside model vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("row length {len} exceeds the model maximum {max}")]
    RowTooLong { len: usize, max: usize },
    #[error("attention mask does not match the batch it was derived from")]
    MaskMismatch,
    #[error("invalid segment: {0}")]
    BadSegment(String),
    #[error("batch has no scored positions")]
    NoScoredPositions,
}

/// Hyperparameters of the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum row length the position table covers.
    pub max_len: usize,
}

/// Standard deviation of the embedding initializer.
pub const EMBED_INIT_STD: f64 = 0.02;
/// Layer-norm variance floor.
const NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_len == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Tensor names and shapes, in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut shapes = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for i in 0..self.n_layers {
            let p = |name: &str| format!("layers.{i}.{name}");
            shapes.push((p("norm1_gain"), vec![d]));
            shapes.push((p("norm1_bias"), vec![d]));
            shapes.push((p("wq"), vec![d, d]));
            shapes.push((p("wk"), vec![d, d]));
            shapes.push((p("wv"), vec![d, d]));
            shapes.push((p("wo"), vec![d, d]));
            shapes.push((p("norm2_gain"), vec![d]));
            shapes.push((p("norm2_bias"), vec![d]));
            shapes.push((p("w1"), vec![d, self.d_ff]));
            shapes.push((p("b1"), vec![self.d_ff]));
            shapes.push((p("w2"), vec![self.d_ff, d]));
            shapes.push((p("b2"), vec![d]));
        }
        shapes.push(("final_gain".to_string(), vec![d]));
        shapes.push(("final_bias".to_string(), vec![d]));
        shapes.push(("head".to_string(), vec![d, self.vocab_size]));
        shapes
    }

    /// Closed-form parameter count; always equals the stored element count.
    pub fn param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab_size as u64;
        let ff = self.d_ff as u64;
        let per_layer = 4 * d * d // attention projections
            + 2 * 2 * d           // two layer norms (gain + bias)
            + d * ff + ff         // ffn in
            + ff * d + d;         // ffn out
        v * d + self.max_len as u64 * d + self.n_layers as u64 * per_layer + 2 * d + d * v
    }
}

/// One residual block's tensors. Weight matrices are row-major
/// `[fan_in][fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors<T> {
    pub norm1_gain: Vec<T>,
    pub norm1_bias: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub norm2_gain: Vec<T>,
    pub norm2_bias: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// The full set of model tensors. `TensorSet<f32>` is the stored parameter
/// type ([`Params`]); `TensorSet<f64>` holds gradients and the compute-time
/// copy of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet<T> {
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerTensors<T>>,
    pub final_gain: Vec<T>,
    pub final_bias: Vec<T>,
    pub head: Vec<T>,
}

pub type Params = TensorSet<f32>;
pub type Grads = TensorSet<f64>;

impl<T: Clone + Default> TensorSet<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: vec![T::default(); cfg.vocab_size * d],
            pos_emb: vec![T::default(); cfg.max_len * d],
            layers: (0..cfg.n_layers)
                .map(|_| LayerTensors {
                    norm1_gain: vec![T::default(); d],
                    norm1_bias: vec![T::default(); d],
                    wq: vec![T::default(); d * d],
                    wk: vec![T::default(); d * d],
                    wv: vec![T::default(); d * d],
                    wo: vec![T::default(); d * d],
                    norm2_gain: vec![T::default(); d],
                    norm2_bias: vec![T::default(); d],
                    w1: vec![T::default(); d * cfg.d_ff],
                    b1: vec![T::default(); cfg.d_ff],
                    w2: vec![T::default(); cfg.d_ff * d],
                    b2: vec![T::default(); d],
                })
                .collect(),
            final_gain: vec![T::default(); d],
            final_bias: vec![T::default(); d],
            head: vec![T::default(); d * cfg.vocab_size],
        }
    }
}

impl<T> TensorSet<T> {
    /// Tensors in checkpoint order, names matching
    /// [`ModelConfig::tensor_shapes`].
    pub fn named(&self) -> Vec<(String, &Vec<T>)> {
        let mut out: Vec<(String, &Vec<T>)> = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.push((p("norm1_gain"), &l.norm1_gain));
            out.push((p("norm1_bias"), &l.norm1_bias));
            out.push((p("wq"), &l.wq));
            out.push((p("wk"), &l.wk));
            out.push((p("wv"), &l.wv));
            out.push((p("wo"), &l.wo));
            out.push((p("norm2_gain"), &l.norm2_gain));
            out.push((p("norm2_bias"), &l.norm2_bias));
            out.push((p("w1"), &l.w1));
            out.push((p("b1"), &l.b1));
            out.push((p("w2"), &l.w2));
            out.push((p("b2"), &l.b2));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.push((p("norm1_gain"), &mut l.norm1_gain));
            out.push((p("norm1_bias"), &mut l.norm1_bias));
            out.push((p("wq"), &mut l.wq));
            out.push((p("wk"), &mut l.wk));
            out.push((p("wv"), &mut l.wv));
            out.push((p("wo"), &mut l.wo));
            out.push((p("norm2_gain"), &mut l.norm2_gain));
            out.push((p("norm2_bias"), &mut l.norm2_bias));
            out.push((p("w1"), &mut l.w1));
            out.push((p("b1"), &mut l.b1));
            out.push((p("w2"), &mut l.w2));
            out.push((p("b2"), &mut l.b2));
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn numel(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

impl TensorSet<f32> {
    /// Compute-time copy; conversion happens once per step or call, not per
    /// arithmetic operation.
    pub fn to_f64(&self) -> TensorSet<f64> {
        TensorSet {
            tok_emb: self.tok_emb.iter().map(|&x| x as f64).collect(),
            pos_emb: self.pos_emb.iter().map(|&x| x as f64).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensors {
                    norm1_gain: l.norm1_gain.iter().map(|&x| x as f64).collect(),
                    norm1_bias: l.norm1_bias.iter().map(|&x| x as f64).collect(),
                    wq: l.wq.iter().map(|&x| x as f64).collect(),
                    wk: l.wk.iter().map(|&x| x as f64).collect(),
                    wv: l.wv.iter().map(|&x| x as f64).collect(),
                    wo: l.wo.iter().map(|&x| x as f64).collect(),
                    norm2_gain: l.norm2_gain.iter().map(|&x| x as f64).collect(),
                    norm2_bias: l.norm2_bias.iter().map(|&x| x as f64).collect(),
                    w1: l.w1.iter().map(|&x| x as f64).collect(),
                    b1: l.b1.iter().map(|&x| x as f64).collect(),
                    w2: l.w2.iter().map(|&x| x as f64).collect(),
                    b2: l.b2.iter().map(|&x| x as f64).collect(),
                })
                .collect(),
            final_gain: self.final_gain.iter().map(|&x| x as f64).collect(),
            final_bias: self.final_bias.iter().map(|&x| x as f64).collect(),
            head: self.head.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Initialize parameters: embeddings at std [`EMBED_INIT_STD`], projection
/// matrices at variance `1 / d_model`, norms at gain 1 / bias 0, all other
/// biases 0. Draw order is fixed, so a seed pins every value.
pub fn init_params(cfg: &ModelConfig, rng: &mut StdRng) -> Result<Params, ModelError> {
    cfg.validate()?;
    let emb = Normal::new(0.0, EMBED_INIT_STD).expect("valid std");
    let proj = Normal::new(0.0, (1.0 / cfg.d_model as f64).sqrt()).expect("valid std");
    let mut p = Params::zeros(cfg);
    let fill = |t: &mut Vec<f32>, dist: &Normal<f64>, rng: &mut StdRng| {
        for x in t.iter_mut() {
            *x = dist.sample(rng) as f32;
        }
    };
    fill(&mut p.tok_emb, &emb, rng);
    fill(&mut p.pos_emb, &emb, rng);
    for l in &mut p.layers {
        fill(&mut l.wq, &proj, rng);
        fill(&mut l.wk, &proj, rng);
        fill(&mut l.wv, &proj, rng);
        fill(&mut l.wo, &proj, rng);
        fill(&mut l.w1, &proj, rng);
        fill(&mut l.w2, &proj, rng);
        l.norm1_gain.iter_mut().for_each(|x| *x = 1.0);
        l.norm2_gain.iter_mut().for_each(|x| *x = 1.0);
    }
    p.final_gain.iter_mut().for_each(|x| *x = 1.0);
    fill(&mut p.head, &proj, rng);
    Ok(p)
}

// ---------------------------------------------------------------------------
// numeric helpers

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x) * (1.0 - t * t);
    0.5 * (1.0 + t) + 0.5 * x * dt
}

/// Numerically stable log-softmax. Invariant to adding a constant to every
/// input, which is what makes rank-classification scores shift-invariant.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

// ---------------------------------------------------------------------------
// row-level forward / backward

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: NormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, indexed `head * row_len + query`, each covering
    /// keys `[seg.start, kend)` of the query's segment.
    probs: Vec<Vec<f64>>,
    mix: Vec<f64>,
    ln2: NormCache,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
}

struct RowState {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
}

/// Layer norm over the covered positions; uncovered positions stay zero.
fn layer_norm(
    x: &[f64],
    segs: &[Segment],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    row_len: usize,
) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; row_len];
    for seg in segs {
        for pos in seg.start..seg.end {
            let xs = &x[pos * d..(pos + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd[pos] = r;
            for c in 0..d {
                let h = (xs[c] - mean) * r;
                xhat[pos * d + c] = h;
                out[pos * d + c] = h * gain[c] + bias[c];
            }
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    segs: &[Segment],
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    for seg in segs {
        for pos in seg.start..seg.end {
            let o = pos * d;
            let r = cache.rstd[pos];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let g = dy[o + c];
                dgain[c] += g * cache.xhat[o + c];
                dbias[c] += g;
                let dxh = g * gain[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[o + c];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for c in 0..d {
                let dxh = dy[o + c] * gain[c];
                dx[o + c] += r * (dxh - mean_dxhat - cache.xhat[o + c] * mean_dxhat_xhat);
            }
        }
    }
}

/// `out[pos] = x[pos] . w (+ bias)` over covered positions; `w` is
/// `[d_in][d_out]` row-major.
fn affine(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    segs: &[Segment],
    d_in: usize,
    d_out: usize,
    out: &mut [f64],
) {
    for seg in segs {
        for pos in seg.start..seg.end {
            let xr = &x[pos * d_in..(pos + 1) * d_in];
            let or = &mut out[pos * d_out..(pos + 1) * d_out];
            match bias {
                Some(b) => or.copy_from_slice(b),
                None => or.fill(0.0),
            }
            for (i, &a) in xr.iter().enumerate() {
                let wr = &w[i * d_out..(i + 1) * d_out];
                for (o, &wv) in or.iter_mut().zip(wr.iter()) {
                    *o += a * wv;
                }
            }
        }
    }
}

/// `dx[pos] += dy[pos] . w^T` over covered positions.
fn affine_backward_dx(
    dy: &[f64],
    w: &[f64],
    segs: &[Segment],
    d_in: usize,
    d_out: usize,
    dx: &mut [f64],
) {
    for seg in segs {
        for pos in seg.start..seg.end {
            let dyr = &dy[pos * d_out..(pos + 1) * d_out];
            let dxr = &mut dx[pos * d_in..(pos + 1) * d_in];
            for (i, dxv) in dxr.iter_mut().enumerate() {
                let wr = &w[i * d_out..(i + 1) * d_out];
                *dxv += wr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum::<f64>();
            }
        }
    }
}

/// `dw += x^T . dy`, `db += sum(dy)` over covered positions.
fn affine_backward_dw(
    x: &[f64],
    dy: &[f64],
    segs: &[Segment],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: Option<&mut Vec<f64>>,
) {
    for seg in segs {
        for pos in seg.start..seg.end {
            let xr = &x[pos * d_in..(pos + 1) * d_in];
            let dyr = &dy[pos * d_out..(pos + 1) * d_out];
            for (i, &a) in xr.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dwr = &mut dw[i * d_out..(i + 1) * d_out];
                for (o, &g) in dwr.iter_mut().zip(dyr.iter()) {
                    *o += a * g;
                }
            }
        }
    }
    if let Some(db) = db {
        for seg in segs {
            for pos in seg.start..seg.end {
                let dyr = &dy[pos * d_out..(pos + 1) * d_out];
                for (b, &g) in db.iter_mut().zip(dyr.iter()) {
                    *b += g;
                }
            }
        }
    }
}

/// Keys visible to query `i` inside `seg`: the contiguous range
/// `[seg.start, max(prefix_end, i + 1))`.
fn key_end(seg: &Segment, i: usize) -> usize {
    seg.prefix_end().max(i + 1)
}

fn forward_row(
    p: &TensorSet<f64>,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    segs: &[Segment],
) -> RowState {
    let d = cfg.d_model;
    let row_len = tokens.len();
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; row_len * d];
    for seg in segs {
        for pos in seg.start..seg.end {
            let t = tokens[pos] as usize;
            let rel = pos - seg.start;
            for c in 0..d {
                x[pos * d + c] = p.tok_emb[t * d + c] + p.pos_emb[rel * d + c];
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lt in &p.layers {
        let (h1, ln1) = layer_norm(&x, segs, d, &lt.norm1_gain, &lt.norm1_bias, row_len);
        let mut q = vec![0.0; row_len * d];
        let mut k = vec![0.0; row_len * d];
        let mut v = vec![0.0; row_len * d];
        affine(&h1, &lt.wq, None, segs, d, d, &mut q);
        affine(&h1, &lt.wk, None, segs, d, d, &mut k);
        affine(&h1, &lt.wv, None, segs, d, d, &mut v);

        let mut probs: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_heads * row_len];
        let mut mix = vec![0.0; row_len * d];
        for seg in segs {
            for h in 0..cfg.n_heads {
                let off = h * hd;
                for i in seg.start..seg.end {
                    let kend = key_end(seg, i);
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut scores: Vec<f64> = (seg.start..kend)
                        .map(|j| {
                            let kj = &k[j * d + off..j * d + off + hd];
                            qi.iter().zip(kj.iter()).map(|(&a, &b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in scores.iter_mut() {
                        *s /= sum;
                    }
                    let mr = &mut mix[i * d + off..i * d + off + hd];
                    for (jj, &a) in scores.iter().enumerate() {
                        let vj = &v[(seg.start + jj) * d + off..(seg.start + jj) * d + off + hd];
                        for (m, &vv) in mr.iter_mut().zip(vj.iter()) {
                            *m += a * vv;
                        }
                    }
                    probs[h * row_len + i] = scores;
                }
            }
        }

        let mut attn_out = vec![0.0; row_len * d];
        affine(&mix, &lt.wo, None, segs, d, d, &mut attn_out);
        for seg in segs {
            for idx in seg.start * d..seg.end * d {
                x[idx] += attn_out[idx];
            }
        }

        let (h2, ln2) = layer_norm(&x, segs, d, &lt.norm2_gain, &lt.norm2_bias, row_len);
        let mut ffn_pre = vec![0.0; row_len * cfg.d_ff];
        affine(&h2, &lt.w1, Some(&lt.b1), segs, d, cfg.d_ff, &mut ffn_pre);
        let mut ffn_act = vec![0.0; row_len * cfg.d_ff];
        for seg in segs {
            for idx in seg.start * cfg.d_ff..seg.end * cfg.d_ff {
                ffn_act[idx] = gelu(ffn_pre[idx]);
            }
        }
        let mut ffn_out = vec![0.0; row_len * d];
        affine(&ffn_act, &lt.w2, Some(&lt.b2), segs, cfg.d_ff, d, &mut ffn_out);
        for seg in segs {
            for idx in seg.start * d..seg.end * d {
                x[idx] += ffn_out[idx];
            }
        }

        layers.push(LayerCache { ln1, q, k, v, probs, mix, ln2, ffn_pre, ffn_act });
    }

    RowState { layers, x_final: x }
}

/// Final layer norm + head at one position of a finished row.
fn logits_at(p: &TensorSet<f64>, cfg: &ModelConfig, x_final: &[f64], pos: usize) -> Vec<f64> {
    let d = cfg.d_model;
    let xs = &x_final[pos * d..(pos + 1) * d];
    let mean = xs.iter().sum::<f64>() / d as f64;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let r = 1.0 / (var + NORM_EPS).sqrt();
    let mut logits = vec![0.0; cfg.vocab_size];
    for c in 0..d {
        let h = (xs[c] - mean) * r * p.final_gain[c] + p.final_bias[c];
        if h == 0.0 {
            continue;
        }
        let wr = &p.head[c * cfg.vocab_size..(c + 1) * cfg.vocab_size];
        for (l, &wv) in logits.iter_mut().zip(wr.iter()) {
            *l += h * wv;
        }
    }
    logits
}

// ---------------------------------------------------------------------------
// batch-level API

/// Per-scored-position output of [`forward_loss`].
pub struct ScoredPosition {
    pub row: usize,
    /// The loss-mask position whose token is predicted.
    pub pos: usize,
    pub target: TokenId,
    /// Log-probabilities over the vocabulary for the token at `pos`.
    pub logprobs: Vec<f64>,
}

pub struct ForwardOutput {
    /// Mean negative log-likelihood over all scored positions of the batch.
    pub mean_loss: f64,
    pub scored: Vec<ScoredPosition>,
}

fn validate_batch(
    cfg: &ModelConfig,
    batch: &PackedBatch,
    mask: &AttentionMask,
) -> Result<(), ModelError> {
    cfg.validate()?;
    if batch.row_len > cfg.max_len {
        return Err(ModelError::RowTooLong { len: batch.row_len, max: cfg.max_len });
    }
    if mask.row_len != batch.row_len || mask.segments != batch.segments {
        return Err(ModelError::MaskMismatch);
    }
    for (row, segs) in batch.rows.iter().zip(&batch.segments) {
        if row.len() != batch.row_len {
            return Err(ModelError::BadSegment("row length differs from row_len".into()));
        }
        let mut prev_end = 0;
        for seg in segs {
            if seg.start >= seg.end || seg.end > batch.row_len {
                return Err(ModelError::BadSegment(format!("bounds {seg:?}")));
            }
            if seg.prefix_len == 0 || seg.prefix_len > seg.len() {
                return Err(ModelError::BadSegment(format!(
                    "prefix length {} outside 1..={}",
                    seg.prefix_len,
                    seg.len()
                )));
            }
            if seg.start < prev_end {
                return Err(ModelError::BadSegment("segments overlap".into()));
            }
            prev_end = seg.end;
            for pos in seg.start..seg.end {
                let id = row[pos];
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
                }
            }
        }
    }
    Ok(())
}

/// Scored positions of one row: `(logit position, label position, label)`.
fn score_points(tokens: &[TokenId], segs: &[Segment]) -> Vec<(usize, usize, TokenId)> {
    let mut out = Vec::new();
    for seg in segs {
        for j in seg.prefix_end()..seg.end {
            out.push((j - 1, j, tokens[j]));
        }
    }
    out
}

/// Mean loss and per-position log-probabilities over the whole batch.
pub fn forward_loss(
    params: &Params,
    cfg: &ModelConfig,
    batch: &PackedBatch,
    mask: &AttentionMask,
) -> Result<ForwardOutput, ModelError> {
    validate_batch(cfg, batch, mask)?;
    let p = params.to_f64();
    forward_loss_f64(&p, cfg, batch, mask)
}

/// Same as [`forward_loss`] but over an already-converted parameter set,
/// for callers that run many forwards per parameter state.
pub fn forward_loss_f64(
    p: &TensorSet<f64>,
    cfg: &ModelConfig,
    batch: &PackedBatch,
    mask: &AttentionMask,
) -> Result<ForwardOutput, ModelError> {
    validate_batch(cfg, batch, mask)?;
    let mut scored = Vec::new();
    let mut nll_sum = 0.0;
    for (row_idx, (tokens, segs)) in batch.rows.iter().zip(&batch.segments).enumerate() {
        let state = forward_row(p, cfg, tokens, segs);
        for (lp, tp, label) in score_points(tokens, segs) {
            let logits = logits_at(p, cfg, &state.x_final, lp);
            let logprobs = log_softmax(&logits);
            nll_sum -= logprobs[label as usize];
            scored.push(ScoredPosition { row: row_idx, pos: tp, target: label, logprobs });
        }
    }
    if scored.is_empty() {
        return Err(ModelError::NoScoredPositions);
    }
    Ok(ForwardOutput { mean_loss: nll_sum / scored.len() as f64, scored })
}

/// Mean loss and exact gradients for every parameter.
pub fn grad(
    params: &Params,
    cfg: &ModelConfig,
    batch: &PackedBatch,
    mask: &AttentionMask,
) -> Result<(f64, Grads), ModelError> {
    validate_batch(cfg, batch, mask)?;
    let p = params.to_f64();
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let ff = cfg.d_ff;
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let total_scored: usize = batch
        .rows
        .iter()
        .zip(&batch.segments)
        .map(|(t, s)| score_points(t, s).len())
        .sum();
    if total_scored == 0 {
        return Err(ModelError::NoScoredPositions);
    }
    let inv_m = 1.0 / total_scored as f64;

    let mut g = Grads::zeros(cfg);
    let mut nll_sum = 0.0;

    for (tokens, segs) in batch.rows.iter().zip(&batch.segments) {
        let row_len = tokens.len();
        let state = forward_row(&p, cfg, tokens, segs);
        let mut dx = vec![0.0; row_len * d];

        // Head and final norm, one scored position at a time.
        for (lp, _tp, label) in score_points(tokens, segs) {
            let xs = &state.x_final[lp * d..(lp + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            let xhat: Vec<f64> = xs.iter().map(|&a| (a - mean) * rstd).collect();
            let h: Vec<f64> = (0..d).map(|c| xhat[c] * p.final_gain[c] + p.final_bias[c]).collect();
            let mut logits = vec![0.0; v];
            for c in 0..d {
                if h[c] == 0.0 {
                    continue;
                }
                let wr = &p.head[c * v..(c + 1) * v];
                for (l, &wv) in logits.iter_mut().zip(wr.iter()) {
                    *l += h[c] * wv;
                }
            }
            let logprobs = log_softmax(&logits);
            nll_sum -= logprobs[label as usize];

            // d loss / d logits = (softmax - onehot) / M
            let mut dlogits: Vec<f64> = logprobs.iter().map(|&lpv| lpv.exp() * inv_m).collect();
            dlogits[label as usize] -= inv_m;

            let mut dh = vec![0.0; d];
            for c in 0..d {
                let wr = &p.head[c * v..(c + 1) * v];
                let gr = &mut g.head[c * v..(c + 1) * v];
                let mut acc = 0.0;
                for ((gw, &wv), &dl) in gr.iter_mut().zip(wr.iter()).zip(dlogits.iter()) {
                    *gw += h[c] * dl;
                    acc += wv * dl;
                }
                dh[c] = acc;
            }
            // Final layer norm backward at this position.
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                g.final_gain[c] += dh[c] * xhat[c];
                g.final_bias[c] += dh[c];
                let dxh = dh[c] * p.final_gain[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat[c];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for c in 0..d {
                let dxh = dh[c] * p.final_gain[c];
                dx[lp * d + c] += rstd * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
        }

        // Residual blocks in reverse.
        for (li, lc) in state.layers.iter().enumerate().rev() {
            let lt = &p.layers[li];
            let gl = &mut g.layers[li];

            // FFN branch: x_out = x_mid + ffn(ln2(x_mid)).
            let mut dact = vec![0.0; row_len * ff];
            affine_backward_dx(&dx, &lt.w2, segs, ff, d, &mut dact);
            affine_backward_dw(&lc.ffn_act, &dx, segs, ff, d, &mut gl.w2, Some(&mut gl.b2));
            let mut dpre = vec![0.0; row_len * ff];
            for seg in segs {
                for idx in seg.start * ff..seg.end * ff {
                    dpre[idx] = dact[idx] * gelu_deriv(lc.ffn_pre[idx]);
                }
            }
            // ln2 output feeds w1.
            let h2 = {
                // Recompute ln2 output from its cache.
                let mut h = vec![0.0; row_len * d];
                for seg in segs {
                    for pos in seg.start..seg.end {
                        for c in 0..d {
                            h[pos * d + c] =
                                lc.ln2.xhat[pos * d + c] * lt.norm2_gain[c] + lt.norm2_bias[c];
                        }
                    }
                }
                h
            };
            let mut dh2 = vec![0.0; row_len * d];
            affine_backward_dx(&dpre, &lt.w1, segs, d, ff, &mut dh2);
            affine_backward_dw(&h2, &dpre, segs, d, ff, &mut gl.w1, Some(&mut gl.b1));
            layer_norm_backward(
                &dh2,
                &lc.ln2,
                segs,
                d,
                &lt.norm2_gain,
                &mut gl.norm2_gain,
                &mut gl.norm2_bias,
                &mut dx,
            );

            // Attention branch: x_mid = x_in + wo(mix(ln1(x_in))).
            let mut dmix = vec![0.0; row_len * d];
            affine_backward_dx(&dx, &lt.wo, segs, d, d, &mut dmix);
            affine_backward_dw(&lc.mix, &dx, segs, d, d, &mut gl.wo, None);

            let mut dq = vec![0.0; row_len * d];
            let mut dk = vec![0.0; row_len * d];
            let mut dv = vec![0.0; row_len * d];
            for seg in segs {
                for h in 0..cfg.n_heads {
                    let off = h * hd;
                    for i in seg.start..seg.end {
                        let probs = &lc.probs[h * row_len + i];
                        if probs.is_empty() {
                            continue;
                        }
                        let dmr = &dmix[i * d + off..i * d + off + hd];
                        // dprobs_j = dmix_i . v_j ; then softmax backward.
                        let mut dprobs: Vec<f64> = probs
                            .iter()
                            .enumerate()
                            .map(|(jj, _)| {
                                let vj = &lc.v
                                    [(seg.start + jj) * d + off..(seg.start + jj) * d + off + hd];
                                dmr.iter().zip(vj.iter()).map(|(&a, &b)| a * b).sum::<f64>()
                            })
                            .collect();
                        let dot: f64 =
                            probs.iter().zip(dprobs.iter()).map(|(&a, &b)| a * b).sum();
                        for (dp, &pr) in dprobs.iter_mut().zip(probs.iter()) {
                            *dp = pr * (*dp - dot);
                        }
                        // dv_j += probs_j * dmix_i ; dq_i += ds_j k_j ; dk_j += ds_j q_i.
                        let qi = &lc.q[i * d + off..i * d + off + hd];
                        let mut dqi = vec![0.0; hd];
                        for (jj, (&pr, &ds)) in probs.iter().zip(dprobs.iter()).enumerate() {
                            let jpos = seg.start + jj;
                            let vslice = &mut dv[jpos * d + off..jpos * d + off + hd];
                            for (dvv, &dm) in vslice.iter_mut().zip(dmr.iter()) {
                                *dvv += pr * dm;
                            }
                            let kj = &lc.k[jpos * d + off..jpos * d + off + hd];
                            let kslice = &mut dk[jpos * d + off..jpos * d + off + hd];
                            for c in 0..hd {
                                dqi[c] += ds * kj[c] * scale;
                                kslice[c] += ds * qi[c] * scale;
                            }
                        }
                        let qslice = &mut dq[i * d + off..i * d + off + hd];
                        for (dqv, &a) in qslice.iter_mut().zip(dqi.iter()) {
                            *dqv += a;
                        }
                    }
                }
            }

            let h1 = {
                let mut h = vec![0.0; row_len * d];
                for seg in segs {
                    for pos in seg.start..seg.end {
                        for c in 0..d {
                            h[pos * d + c] =
                                lc.ln1.xhat[pos * d + c] * lt.norm1_gain[c] + lt.norm1_bias[c];
                        }
                    }
                }
                h
            };
            let mut dh1 = vec![0.0; row_len * d];
            affine_backward_dx(&dq, &lt.wq, segs, d, d, &mut dh1);
            affine_backward_dx(&dk, &lt.wk, segs, d, d, &mut dh1);
            affine_backward_dx(&dv, &lt.wv, segs, d, d, &mut dh1);
            affine_backward_dw(&h1, &dq, segs, d, d, &mut gl.wq, None);
            affine_backward_dw(&h1, &dk, segs, d, d, &mut gl.wk, None);
            affine_backward_dw(&h1, &dv, segs, d, d, &mut gl.wv, None);
            layer_norm_backward(
                &dh1,
                &lc.ln1,
                segs,
                d,
                &lt.norm1_gain,
                &mut gl.norm1_gain,
                &mut gl.norm1_bias,
                &mut dx,
            );
        }

        // Embedding scatter.
        for seg in segs {
            for pos in seg.start..seg.end {
                let t = tokens[pos] as usize;
                let rel = pos - seg.start;
                for c in 0..d {
                    g.tok_emb[t * d + c] += dx[pos * d + c];
                    g.pos_emb[rel * d + c] += dx[pos * d + c];
                }
            }
        }
    }

    Ok((nll_sum / total_scored as f64, g))
}

/// Logits at the last position of a single unpacked sequence with a
/// bidirectional prefix of `prefix_len` tokens. Used by the decoding loop.
pub fn forward_logits_last(
    p: &TensorSet<f64>,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    prefix_len: usize,
) -> Result<Vec<f64>, ModelError> {
    cfg.validate()?;
    let n = tokens.len();
    if n == 0 || prefix_len == 0 || prefix_len > n {
        return Err(ModelError::BadSegment(format!(
            "sequence length {n} with prefix length {prefix_len}"
        )));
    }
    if n > cfg.max_len {
        return Err(ModelError::RowTooLong { len: n, max: cfg.max_len });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: t, vocab: cfg.vocab_size });
        }
    }
    let segs = [Segment { start: 0, end: n, prefix_len }];
    let state = forward_row(p, cfg, tokens, &segs);
    Ok(logits_at(p, cfg, &state.x_final, n - 1))
}
