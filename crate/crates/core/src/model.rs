//! Toy-scale decoder with interleaved sliding-window/full attention,
//! RoPE on sliding layers and no positional signal on full layers, GQA,
//! a parallel residual block, tied embeddings, document masking, and a
//! KV-cache byte calculator.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, TensorId};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}")]
    BadGrouping { n_heads: usize, n_kv_heads: usize },
    #[error("n_layers {0} not divisible by 4 (3:1 pattern)")]
    BadLayerCount(usize),
    #[error("window {window} exceeds max_seq {max_seq}")]
    WindowTooLarge { window: usize, max_seq: usize },
    #[error("window must be >= 1")]
    ZeroWindow,
    #[error("head_dim {0} must be even for rotary embedding")]
    OddHeadDim(usize),
    #[error("token {token} out of range [0, {vocab}) at batch {row}, position {pos}")]
    TokenOutOfRange { token: usize, vocab: usize, row: usize, pos: usize },
    #[error("doc_ids must be non-decreasing along each row (row {0})")]
    DocIdsNotSorted(usize),
    #[error("parameter name '{0}' looks like a bias; the architecture has none")]
    BiasParam(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Sliding-window attention with rotary positional embedding.
    SlidingWindowRope,
    /// Full attention with no positional signal.
    FullNope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub window: usize,
    pub rope_base: f64,
    pub max_seq: usize,
    pub dtype_bytes: usize,
}

impl ModelConfig {
    /// Sub-second default used across the test suite.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 8,
            n_kv_heads: 2,
            head_dim: 8,
            d_ff: 128,
            window: 64,
            rope_base: 10_000.0,
            max_seq: 256,
            dtype_bytes: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(ModelError::BadGrouping {
                n_heads: self.n_heads,
                n_kv_heads: self.n_kv_heads,
            });
        }
        if self.window > self.max_seq {
            return Err(ModelError::WindowTooLarge {
                window: self.window,
                max_seq: self.max_seq,
            });
        }
        if self.window < 1 {
            return Err(ModelError::ZeroWindow);
        }
        layer_pattern(self.n_layers)?;
        Ok(())
    }
}

/// Three sliding layers then one full layer, repeated; full layers sit at
/// indices 3, 7, 11, ...
pub fn layer_pattern(n_layers: usize) -> Result<Vec<LayerKind>> {
    if n_layers == 0 || n_layers % 4 != 0 {
        return Err(ModelError::BadLayerCount(n_layers));
    }
    Ok((0..n_layers)
        .map(|i| {
            if i % 4 == 3 {
                LayerKind::FullNope
            } else {
                LayerKind::SlidingWindowRope
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub doc_ids: Vec<Vec<usize>>,
    pub positions: Vec<Vec<usize>>,
}

impl SequenceBatch {
    /// Single-document batch with 0..s positions per row.
    pub fn simple(token_ids: Vec<Vec<usize>>) -> Self {
        let doc_ids = token_ids.iter().map(|r| vec![0; r.len()]).collect();
        let positions = token_ids.iter().map(|r| (0..r.len()).collect()).collect();
        SequenceBatch { token_ids, doc_ids, positions }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        for (r, row) in self.token_ids.iter().enumerate() {
            for (p, &t) in row.iter().enumerate() {
                if t >= vocab {
                    return Err(ModelError::TokenOutOfRange { token: t, vocab, row: r, pos: p });
                }
            }
            if self.doc_ids[r].windows(2).any(|w| w[0] > w[1]) {
                return Err(ModelError::DocIdsNotSorted(r));
            }
        }
        Ok(())
    }
}

/// Plain-array rotary rotation over `[n_heads, seq, head_dim]`, pairing
/// dimension i with i + head_dim/2 at angle position * base^(-2i/head_dim).
pub fn rope_rotate(
    vectors: &[f64],
    n_heads: usize,
    seq: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
) -> Result<Vec<f64>> {
    if head_dim % 2 != 0 {
        return Err(ModelError::OddHeadDim(head_dim));
    }
    assert_eq!(vectors.len(), n_heads * seq * head_dim);
    assert_eq!(positions.len(), seq);
    let half = head_dim / 2;
    let mut out = vectors.to_vec();
    for h in 0..n_heads {
        for s in 0..seq {
            let off = (h * seq + s) * head_dim;
            for i in 0..half {
                let angle = positions[s] as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (sin, cos) = angle.sin_cos();
                let a = vectors[off + i];
                let b = vectors[off + i + half];
                out[off + i] = a * cos - b * sin;
                out[off + i + half] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

/// (cos, sin) constant tables of shape [seq, head_dim] matching
/// [`rope_rotate`]'s pairing convention.
fn rope_tables(positions: &[usize], head_dim: usize, base: f64) -> (Tensor, Tensor) {
    let half = head_dim / 2;
    let seq = positions.len();
    let mut cos = vec![0.0; seq * head_dim];
    let mut sin = vec![0.0; seq * head_dim];
    for (s, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let angle = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (sn, cs) = angle.sin_cos();
            cos[s * head_dim + i] = cs;
            cos[s * head_dim + i + half] = cs;
            sin[s * head_dim + i] = sn;
            sin[s * head_dim + i + half] = sn;
        }
    }
    (
        Tensor::new(vec![seq, head_dim], cos).expect("finite"),
        Tensor::new(vec![seq, head_dim], sin).expect("finite"),
    )
}

/// In-graph rotary application to a [seq, head_dim] tensor.
fn apply_rope(
    g: &mut Graph,
    x: TensorId,
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<TensorId> {
    if head_dim % 2 != 0 {
        return Err(ModelError::OddHeadDim(head_dim));
    }
    let (cos, sin) = rope_tables(positions, head_dim, base);
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let half = head_dim / 2;
    // rotate_half(x) = concat(-x[:, half:], x[:, :half])
    let hi = g.slice(x, 1, half, head_dim)?;
    let lo = g.slice(x, 1, 0, half)?;
    let neg_hi = g.scale(hi, -1.0)?;
    let rot = g.concat(1, &[neg_hi, lo])?;
    let xc = g.mul(x, cos)?;
    let rs = g.mul(rot, sin)?;
    Ok(g.add(xc, rs)?)
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSpec<'a> {
    pub kind: LayerKind,
    pub window: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub positions: &'a [usize],
    pub doc_ids: &'a [usize],
}

/// Attention over one sequence. `q` is [seq, n_heads*head_dim], `k`/`v` are
/// [seq, n_kv_heads*head_dim]; each KV head serves n_heads/n_kv_heads query
/// heads. Returns the concatenated head outputs and the per-head attention
/// probability matrices.
pub fn attention_with_probs(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    spec: &AttnSpec,
) -> Result<(TensorId, Vec<TensorId>)> {
    if spec.window < 1 {
        return Err(ModelError::ZeroWindow);
    }
    let seq = g.value(q).shape()[0];
    let hd = spec.head_dim;
    let group = spec.n_heads / spec.n_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // Mask is shared across heads: causal, cross-document, and (for sliding
    // layers) keys older than window-1 positions before the query.
    let mut mask = vec![false; seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            let blocked = j > i
                || spec.doc_ids[i] != spec.doc_ids[j]
                || (spec.kind == LayerKind::SlidingWindowRope && i - j > spec.window - 1);
            mask[i * seq + j] = blocked;
        }
    }

    let mut head_outs = Vec::with_capacity(spec.n_heads);
    let mut probs_all = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let kv = h / group;
        let mut qh = g.slice(q, 1, h * hd, (h + 1) * hd)?;
        let mut kh = g.slice(k, 1, kv * hd, (kv + 1) * hd)?;
        let vh = g.slice(v, 1, kv * hd, (kv + 1) * hd)?;
        if spec.kind == LayerKind::SlidingWindowRope {
            qh = apply_rope(g, qh, spec.positions, hd, spec.rope_base)?;
            kh = apply_rope(g, kh, spec.positions, hd, spec.rope_base)?;
        }
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let masked = g.masked_fill(scaled, &mask, f64::NEG_INFINITY)?;
        let probs = g.softmax_lastdim(masked)?;
        let out = g.matmul(probs, vh)?;
        head_outs.push(out);
        probs_all.push(probs);
    }
    let out = g.concat(1, &head_outs)?;
    Ok((out, probs_all))
}

pub fn attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    spec: &AttnSpec,
) -> Result<TensorId> {
    Ok(attention_with_probs(g, q, k, v, spec)?.0)
}

/// Parameter map: name -> tensor. Names never contain "bias".
pub type ParamMap = BTreeMap<String, Tensor>;

fn reject_bias_names(params: &ParamMap) -> Result<()> {
    for name in params.keys() {
        if name.contains("bias") {
            return Err(ModelError::BiasParam(name.clone()));
        }
    }
    Ok(())
}

pub fn layer_param_names(layer: usize) -> Vec<String> {
    ["ln", "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"]
        .iter()
        .map(|s| format!("layer{layer}.{s}"))
        .collect()
}

/// Random initialization. Matrix entries ~ U(-a, a) with a = 1/sqrt(fan_in);
/// layer-norm gains start at 1. The output projection reuses the embedding.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let a = 1.0 / (rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Tensor::new(vec![rows, cols], data).expect("finite init")
    };
    params.insert("embed".into(), mat(&mut rng, cfg.vocab_size, cfg.d_model));
    let qdim = cfg.n_heads * cfg.head_dim;
    let kvdim = cfg.n_kv_heads * cfg.head_dim;
    for l in 0..cfg.n_layers {
        params.insert(format!("layer{l}.ln"), Tensor::new(vec![cfg.d_model], vec![1.0; cfg.d_model]).unwrap());
        params.insert(format!("layer{l}.wq"), mat(&mut rng, cfg.d_model, qdim));
        params.insert(format!("layer{l}.wk"), mat(&mut rng, cfg.d_model, kvdim));
        params.insert(format!("layer{l}.wv"), mat(&mut rng, cfg.d_model, kvdim));
        params.insert(format!("layer{l}.wo"), mat(&mut rng, qdim, cfg.d_model));
        params.insert(format!("layer{l}.w_gate"), mat(&mut rng, cfg.d_model, cfg.d_ff));
        params.insert(format!("layer{l}.w_up"), mat(&mut rng, cfg.d_model, cfg.d_ff));
        params.insert(format!("layer{l}.w_down"), mat(&mut rng, cfg.d_ff, cfg.d_model));
    }
    params.insert("final_ln".into(), Tensor::new(vec![cfg.d_model], vec![1.0; cfg.d_model]).unwrap());
    params
}

/// Parameters registered as graph leaves for one forward/backward pass.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamMap, trainable: bool) -> Result<Self> {
        reject_bias_names(params)?;
        let ids = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Ok(BoundParams { ids })
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

/// One parallel residual block: out = x + Attn(LN(x)) + FFN(LN(x)).
/// Attention and FFN both read the same normalized input.
pub fn block_forward(
    g: &mut Graph,
    x: TensorId,
    params: &BoundParams,
    layer: usize,
    kind: LayerKind,
    cfg: &ModelConfig,
    positions: &[usize],
    doc_ids: &[usize],
) -> Result<TensorId> {
    let ln = g.layernorm(x, LAYERNORM_EPS)?;
    let gain = params.id(&format!("layer{layer}.ln"))?;
    let normed = g.mul(ln, gain)?;

    let q = g.matmul(normed, params.id(&format!("layer{layer}.wq"))?)?;
    let k = g.matmul(normed, params.id(&format!("layer{layer}.wk"))?)?;
    let v = g.matmul(normed, params.id(&format!("layer{layer}.wv"))?)?;
    let spec = AttnSpec {
        kind,
        window: cfg.window,
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
        rope_base: cfg.rope_base,
        positions,
        doc_ids,
    };
    let attn = attention(g, q, k, v, &spec)?;
    let attn_out = g.matmul(attn, params.id(&format!("layer{layer}.wo"))?)?;

    let gate = g.matmul(normed, params.id(&format!("layer{layer}.w_gate"))?)?;
    let up = g.matmul(normed, params.id(&format!("layer{layer}.w_up"))?)?;
    let hidden = g.swiglu(gate, up)?;
    let ffn_out = g.matmul(hidden, params.id(&format!("layer{layer}.w_down"))?)?;

    let sum = g.add(x, attn_out)?;
    Ok(g.add(sum, ffn_out)?)
}

/// Full forward pass: logits of shape [batch*seq, vocab]. The logit
/// projection is the transpose of the embedding matrix (tied weights).
/// Final hidden states (after the last layernorm), one [seq, d_model]
/// tensor per batch row.
pub fn model_hidden(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
) -> Result<Vec<TensorId>> {
    batch.validate(cfg.vocab_size)?;
    let kinds = layer_pattern(cfg.n_layers)?;
    let embed = params.id("embed")?;
    let gain = params.id("final_ln")?;
    let mut rows = Vec::with_capacity(batch.token_ids.len());
    for (r, tokens) in batch.token_ids.iter().enumerate() {
        let mut x = g.embed_lookup(embed, tokens)?;
        for (l, &kind) in kinds.iter().enumerate() {
            x = block_forward(g, x, params, l, kind, cfg, &batch.positions[r], &batch.doc_ids[r])?;
        }
        let ln = g.layernorm(x, LAYERNORM_EPS)?;
        rows.push(g.mul(ln, gain)?);
    }
    Ok(rows)
}

pub fn model_forward(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
) -> Result<TensorId> {
    let hidden = model_hidden(g, params, cfg, batch)?;
    let embed = params.id("embed")?;
    let unembed = g.transpose(embed)?;
    let mut row_logits = Vec::with_capacity(hidden.len());
    for h in hidden {
        row_logits.push(g.matmul(h, unembed)?);
    }
    Ok(g.concat(0, &row_logits)?)
}

/// Total parameter count (the tied embedding is stored once).
pub fn param_count(params: &ParamMap) -> usize {
    params.values().map(|t| t.len()).sum()
}

/// KV-cache bytes for an explicit layer-kind list.
pub fn kv_cache_bytes_for(kinds: &[LayerKind], cfg: &ModelConfig, seq_len: usize) -> u64 {
    let per_token = 2 * cfg.n_kv_heads * cfg.head_dim * cfg.dtype_bytes;
    kinds
        .iter()
        .map(|k| {
            let cached = match k {
                LayerKind::FullNope => seq_len,
                LayerKind::SlidingWindowRope => cfg.window.min(seq_len),
            };
            (per_token * cached) as u64
        })
        .sum()
}

/// KV-cache bytes under the 3:1 interleaved pattern.
pub fn kv_cache_bytes(cfg: &ModelConfig, seq_len: usize) -> Result<u64> {
    let kinds = layer_pattern(cfg.n_layers)?;
    Ok(kv_cache_bytes_for(&kinds, cfg, seq_len))
}
