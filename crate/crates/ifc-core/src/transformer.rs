//! Transformer building blocks: multi-head attention, post-norm encoder and
//! decoder layers, sinusoidal positional encodings.
//!
//! Positional encodings are added to queries and keys only, never to values.
//! Layers are post-norm (attention -> add -> norm), and every sublayer output
//! passes through dropout in training mode.

use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Dimensions shared by every attention layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::contract(
                "attention_config",
                format!("model_dim {} not divisible by heads {}", model_dim, num_heads),
            ));
        }
        if ffn_dim < model_dim {
            return Err(Error::contract(
                "attention_config",
                format!("ffn_dim {} must be >= model_dim {}", ffn_dim, model_dim),
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::contract("attention_config", "dropout outside [0, 1)"));
        }
        Ok(AttentionConfig {
            model_dim,
            num_heads,
            ffn_dim,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosKind {
    Spatial2d,
    Temporal1d,
}

/// Fixed sinusoidal table, one row per position.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    pub kind: PosKind,
    pub positions: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

impl PositionalEncoding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    /// All-zero encoding (used to disable positional information).
    pub fn zeros(kind: PosKind, positions: usize, dim: usize) -> Self {
        PositionalEncoding {
            kind,
            positions,
            dim,
            table: vec![0.0; positions * dim],
        }
    }

    /// Constant leaf on `g` holding the whole table.
    pub fn leaf(&self, g: &Graph) -> Result<Tensor> {
        g.tensor(&[self.positions, self.dim], self.table.clone())
    }
}

fn sin_cos_fill(table: &mut [f64], pos: usize, dim: usize) {
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        table[2 * i] = angle.sin();
        table[2 * i + 1] = angle.cos();
    }
}

/// Standard interleaved sine/cosine over `t` positions.
pub fn sinusoidal_1d(t: usize, c: usize) -> Result<PositionalEncoding> {
    if c == 0 || c % 2 != 0 {
        return Err(Error::contract("sinusoidal_1d", format!("dim {} must be even", c)));
    }
    let mut table = vec![0.0; t * c];
    for pos in 0..t {
        sin_cos_fill(&mut table[pos * c..(pos + 1) * c], pos, c);
    }
    Ok(PositionalEncoding {
        kind: PosKind::Temporal1d,
        positions: t,
        dim: c,
        table,
    })
}

/// Row/column sinusoids concatenated per position; rows are laid out in
/// row-major (y * w + x) order to match spatial token flattening.
pub fn sinusoidal_2d(h: usize, w: usize, c: usize) -> Result<PositionalEncoding> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::contract(
            "sinusoidal_2d",
            format!("dim {} must be divisible by 4", c),
        ));
    }
    let half = c / 2;
    let mut table = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            sin_cos_fill(&mut table[base..base + half], y, half);
            sin_cos_fill(&mut table[base + half..base + c], x, half);
        }
    }
    Ok(PositionalEncoding {
        kind: PosKind::Spatial2d,
        positions: h * w,
        dim: c,
        table,
    })
}

pub fn ensure_attention(store: &mut ParamStore, prefix: &str, c: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.ensure(
            &format!("{prefix}.{w}"),
            &[c, c],
            Init::Glorot { fan_in: c, fan_out: c },
        );
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.ensure(&format!("{prefix}.{b}"), &[c], Init::Zeros);
    }
}

pub fn ensure_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.ensure(&format!("{prefix}.g"), &[c], Init::Ones);
    store.ensure(&format!("{prefix}.b"), &[c], Init::Zeros);
}

pub fn ensure_ffn(store: &mut ParamStore, prefix: &str, c: usize, f: usize) {
    store.ensure(&format!("{prefix}.w1"), &[c, f], Init::Glorot { fan_in: c, fan_out: f });
    store.ensure(&format!("{prefix}.b1"), &[f], Init::Zeros);
    store.ensure(&format!("{prefix}.w2"), &[f, c], Init::Glorot { fan_in: f, fan_out: c });
    store.ensure(&format!("{prefix}.b2"), &[c], Init::Zeros);
}

pub fn ensure_encoder_layer(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig) {
    ensure_attention(store, &format!("{prefix}.attn"), cfg.model_dim);
    ensure_layer_norm(store, &format!("{prefix}.ln1"), cfg.model_dim);
    ensure_ffn(store, &format!("{prefix}.ffn"), cfg.model_dim, cfg.ffn_dim);
    ensure_layer_norm(store, &format!("{prefix}.ln2"), cfg.model_dim);
}

pub fn ensure_decoder_layer(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig) {
    ensure_attention(store, &format!("{prefix}.self"), cfg.model_dim);
    ensure_layer_norm(store, &format!("{prefix}.ln1"), cfg.model_dim);
    ensure_attention(store, &format!("{prefix}.cross"), cfg.model_dim);
    ensure_layer_norm(store, &format!("{prefix}.ln2"), cfg.model_dim);
    ensure_ffn(store, &format!("{prefix}.ffn"), cfg.model_dim, cfg.ffn_dim);
    ensure_layer_norm(store, &format!("{prefix}.ln3"), cfg.model_dim);
}

fn check_tokens(op: &'static str, t: &Tensor, c: usize) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != c {
        return Err(Error::shape(
            op,
            format!("expected [n, {}], got {:?}", c, t.shape()),
        ));
    }
    Ok(())
}

fn mha_inner(
    fw: &Forward,
    prefix: &str,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    cfg: &AttentionConfig,
    capture_probs: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let c = cfg.model_dim;
    check_tokens("multi_head_attention", q_in, c)?;
    check_tokens("multi_head_attention", k_in, c)?;
    check_tokens("multi_head_attention", v_in, c)?;
    if k_in.shape()[0] == 0 {
        return Err(Error::contract("multi_head_attention", "no keys to attend over"));
    }
    if k_in.shape()[0] != v_in.shape()[0] {
        return Err(Error::shape("multi_head_attention", "key/value count mismatch"));
    }

    let q = q_in
        .matmul(&fw.p(&format!("{prefix}.wq"))?)?
        .add_row(&fw.p(&format!("{prefix}.bq"))?)?;
    let k = k_in
        .matmul(&fw.p(&format!("{prefix}.wk"))?)?
        .add_row(&fw.p(&format!("{prefix}.bk"))?)?;
    let v = v_in
        .matmul(&fw.p(&format!("{prefix}.wv"))?)?
        .add_row(&fw.p(&format!("{prefix}.bv"))?)?;

    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut probs_all = Vec::new();
    for h in 0..cfg.num_heads {
        let qh = q.narrow(1, h * d, d)?;
        let kh = k.narrow(1, h * d, d)?;
        let vh = v.narrow(1, h * d, d)?;
        let (head, probs) = Tensor::scaled_dot_attention(&qh, &kh, &vh, scale, capture_probs)?;
        heads.push(head);
        if let Some(p) = probs {
            probs_all.push(p);
        }
    }
    let cat = Tensor::concat(&heads, 1)?;
    let out = cat
        .matmul(&fw.p(&format!("{prefix}.wo"))?)?
        .add_row(&fw.p(&format!("{prefix}.bo"))?)?;
    Ok((out, probs_all))
}

/// Attention that also returns per-head probability matrices. The returned
/// probability tensors are observation-only.
pub fn mha_with_probs(
    fw: &Forward,
    prefix: &str,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    mha_inner(fw, prefix, q, k, v, cfg, true)
}

/// Multi-head attention over already-positioned queries/keys.
pub fn multi_head_attention(
    fw: &Forward,
    prefix: &str,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    mha_inner(fw, prefix, q, k, v, cfg, false).map(|(out, _)| out)
}

fn ffn(fw: &Forward, prefix: &str, x: &Tensor, _cfg: &AttentionConfig) -> Result<Tensor> {
    let t = x
        .matmul(&fw.p(&format!("{prefix}.w1"))?)?
        .add_row(&fw.p(&format!("{prefix}.b1"))?)?
        .relu()?
        .dropout(fw.dropout_rate())?;
    t.matmul(&fw.p(&format!("{prefix}.w2"))?)?
        .add_row(&fw.p(&format!("{prefix}.b2"))?)
}

fn layer_norm_p(fw: &Forward, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(
        &fw.p(&format!("{prefix}.g"))?,
        &fw.p(&format!("{prefix}.b"))?,
        1e-5,
    )
}

fn encoder_layer_impl(
    fw: &Forward,
    prefix: &str,
    x: &Tensor,
    pos: &Tensor,
    cfg: &AttentionConfig,
    capture: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    if pos.shape() != x.shape() {
        return Err(Error::shape(
            "encoder_layer",
            format!("pos {:?} must cover tokens {:?}", pos.shape(), x.shape()),
        ));
    }
    let qk = x.add(pos)?;
    let (attn, probs) = mha_inner(fw, &format!("{prefix}.attn"), &qk, &qk, x, cfg, capture)?;
    let x1 = layer_norm_p(fw, &format!("{prefix}.ln1"), &x.add(&attn.dropout(fw.dropout_rate())?)?)?;
    let f = ffn(fw, &format!("{prefix}.ffn"), &x1, cfg)?;
    let out = layer_norm_p(fw, &format!("{prefix}.ln2"), &x1.add(&f.dropout(fw.dropout_rate())?)?)?;
    Ok((out, probs))
}

/// Post-norm encoder layer: pos-add -> self-attention -> add+norm -> FFN ->
/// add+norm. Shape preserving.
pub fn encoder_layer(
    fw: &Forward,
    prefix: &str,
    x: &Tensor,
    pos: &Tensor,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    encoder_layer_impl(fw, prefix, x, pos, cfg, false).map(|(out, _)| out)
}

/// Encoder layer that also exposes per-head self-attention probabilities.
pub fn encoder_layer_with_probs(
    fw: &Forward,
    prefix: &str,
    x: &Tensor,
    pos: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    encoder_layer_impl(fw, prefix, x, pos, cfg, true)
}

/// Post-norm decoder layer: query self-attention, cross-attention into the
/// encoder memory, FFN. `query_pos` rides on queries/keys only; `memory_pos`
/// on cross-attention keys only.
pub fn decoder_layer(
    fw: &Forward,
    prefix: &str,
    tgt: &Tensor,
    query_pos: &Tensor,
    memory: &Tensor,
    memory_pos: &Tensor,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    if memory.shape()[0] == 0 {
        return Err(Error::contract("decoder_layer", "empty memory"));
    }
    if memory_pos.shape() != memory.shape() {
        return Err(Error::shape("decoder_layer", "memory_pos must match memory"));
    }
    if query_pos.shape() != tgt.shape() {
        return Err(Error::shape("decoder_layer", "query_pos must match queries"));
    }
    let qk = tgt.add(query_pos)?;
    let sa = multi_head_attention(fw, &format!("{prefix}.self"), &qk, &qk, tgt, cfg)?;
    let t1 = layer_norm_p(fw, &format!("{prefix}.ln1"), &tgt.add(&sa.dropout(fw.dropout_rate())?)?)?;

    let q = t1.add(query_pos)?;
    let k = memory.add(memory_pos)?;
    let ca = multi_head_attention(fw, &format!("{prefix}.cross"), &q, &k, memory, cfg)?;
    let t2 = layer_norm_p(fw, &format!("{prefix}.ln2"), &t1.add(&ca.dropout(fw.dropout_rate())?)?)?;

    let f = ffn(fw, &format!("{prefix}.ffn"), &t2, cfg)?;
    layer_norm_p(fw, &format!("{prefix}.ln3"), &t2.add(&f.dropout(fw.dropout_rate())?)?)
}
