//! Query decoding and mask generation: transformer decoder over object
//! queries, classification and conditional-weight heads, the instance-
//! agnostic spatial decoder, and one-shot clip mask assembly.
//!
//! Object queries are learned embeddings used as the query positional
//! stream; the content stream starts at zero. Cross-attention keys are the
//! concatenated frame and memory tokens of every frame, with spatial (plus
//! temporal, for multi-frame clips) sinusoids on frame tokens and slot
//! embeddings on memory tokens.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{
    decoder_layer, ensure_decoder_layer, sinusoidal_1d, sinusoidal_2d, AttentionConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub attn: AttentionConfig,
    pub num_layers: usize,
    pub num_queries: usize,
    /// Real classes; the no-object class is appended internally.
    pub num_classes: usize,
    /// Channels of the spatial decoder output (the conditional kernels are
    /// this long, plus one bias).
    pub decoder_channels: usize,
    /// Whether memory tokens join the cross-attention keys/values.
    pub include_memory_keys: bool,
}

impl DecoderConfig {
    pub fn classes_with_empty(&self) -> usize {
        self.num_classes + 1
    }

    /// Index of the no-object class.
    pub fn empty_class(&self) -> usize {
        self.num_classes
    }
}

/// Per-clip prediction set: `class_probs [N_q, classes+1]`,
/// `cond_weights [N_q, C_dec+1]`, `mask_logits [N_q, T, H', W']`.
#[derive(Debug)]
pub struct ClipPrediction {
    pub class_probs: Tensor,
    pub cond_weights: Tensor,
    pub mask_logits: Tensor,
    pub t: usize,
    pub mask_h: usize,
    pub mask_w: usize,
}

pub fn ensure_decoder(store: &mut ParamStore, cfg: &DecoderConfig) {
    let c = cfg.attn.model_dim;
    for l in 0..cfg.num_layers {
        ensure_decoder_layer(store, &format!("dec.b{l}"), &cfg.attn);
    }
    store.ensure("dec.queries", &[cfg.num_queries, c], Init::Uniform(1.0));
    store.ensure("head.class.w1", &[c, c], Init::Glorot { fan_in: c, fan_out: c });
    store.ensure("head.class.b1", &[c], Init::Zeros);
    store.ensure(
        "head.class.w2",
        &[c, cfg.classes_with_empty()],
        Init::Glorot { fan_in: c, fan_out: cfg.classes_with_empty() },
    );
    store.ensure("head.class.b2", &[cfg.classes_with_empty()], Init::Zeros);
    store.ensure("head.seg.w1", &[c, c], Init::Glorot { fan_in: c, fan_out: c });
    store.ensure("head.seg.b1", &[c], Init::Zeros);
    store.ensure(
        "head.seg.w2",
        &[c, cfg.decoder_channels + 1],
        Init::Glorot { fan_in: c, fan_out: cfg.decoder_channels + 1 },
    );
    store.ensure("head.seg.b2", &[cfg.decoder_channels + 1], Init::Zeros);

    let cd = cfg.decoder_channels;
    store.ensure("spat.up1.w", &[cd, c, 3, 3], Init::Glorot { fan_in: c * 9, fan_out: cd * 9 });
    store.ensure("spat.up1.b", &[cd], Init::Zeros);
    store.ensure("spat.skip.w", &[cd, c / 2, 1, 1], Init::Glorot { fan_in: c / 2, fan_out: cd });
    store.ensure("spat.skip.b", &[cd], Init::Zeros);
    store.ensure("spat.up2.w", &[cd, cd, 3, 3], Init::Glorot { fan_in: cd * 9, fan_out: cd * 9 });
    store.ensure("spat.up2.b", &[cd], Init::Zeros);
}

/// Cross-attention memory: tokens and their positional rows, concatenated
/// over frames in `[frame tokens; memory tokens]` order.
fn build_memory(fw: &Forward, enc: &EncoderOutput, include_memory: bool) -> Result<(Tensor, Tensor)> {
    let d = enc.dims;
    let g = fw.graph();
    let spatial = sinusoidal_2d(d.h, d.w, d.c)?;
    let temporal = if d.t > 1 {
        sinusoidal_1d(d.t, d.c)?
    } else {
        crate::transformer::PositionalEncoding::zeros(crate::transformer::PosKind::Temporal1d, d.t, d.c)
    };
    let use_memory = include_memory && d.m > 0 && !enc.memory.is_empty();

    let mut tokens = Vec::new();
    let mut pos_parts = Vec::new();
    for t in 0..d.t {
        tokens.push(enc.frame_tokens[t].clone());
        let mut table = Vec::with_capacity(d.hw() * d.c);
        for p in 0..d.hw() {
            table.extend(spatial.row(p).iter().zip(temporal.row(t)).map(|(s, tv)| s + tv));
        }
        pos_parts.push(g.tensor(&[d.hw(), d.c], table)?);
        if use_memory {
            tokens.push(enc.memory[t].clone());
            let trow: Vec<f64> = temporal.row(t).iter().cycle().take(d.m * d.c).cloned().collect();
            let tleaf = g.tensor(&[d.m, d.c], trow)?;
            pos_parts.push(fw.p("enc.memory_pos")?.add(&tleaf)?);
        }
    }
    Ok((Tensor::concat(&tokens, 0)?, Tensor::concat(&pos_parts, 0)?))
}

/// N_D decoder layers over the object queries; returns the output
/// embeddings `[N_q, C]`.
pub fn decode_queries(fw: &Forward, enc: &EncoderOutput, cfg: &DecoderConfig) -> Result<Tensor> {
    if enc.frame_tokens.is_empty() {
        return Err(Error::contract("decode_queries", "empty encoder output"));
    }
    let (memory, memory_pos) = build_memory(fw, enc, cfg.include_memory_keys)?;
    let query_pos = fw.p("dec.queries")?;
    let mut tgt = fw.graph().zeros(&[cfg.num_queries, cfg.attn.model_dim])?;
    for l in 0..cfg.num_layers {
        tgt = decoder_layer(fw, &format!("dec.b{l}"), &tgt, &query_pos, &memory, &memory_pos, &cfg.attn)?;
    }
    Ok(tgt)
}

/// Two fully-connected layers then softmax; rows land on the simplex.
pub fn classification_head(fw: &Forward, embeddings: &Tensor) -> Result<Tensor> {
    embeddings
        .matmul(&fw.p("head.class.w1")?)?
        .add_row(&fw.p("head.class.b1")?)?
        .relu()?
        .matmul(&fw.p("head.class.w2")?)?
        .add_row(&fw.p("head.class.b2")?)?
        .softmax_lastdim()
}

/// Two fully-connected layers, linear output: one conditional 1x1 kernel
/// plus bias per query, shared across all frames of the clip.
pub fn segmentation_head(fw: &Forward, embeddings: &Tensor) -> Result<Tensor> {
    embeddings
        .matmul(&fw.p("head.seg.w1")?)?
        .add_row(&fw.p("head.seg.b1")?)?
        .relu()?
        .matmul(&fw.p("head.seg.w2")?)?
        .add_row(&fw.p("head.seg.b2")?)
}

/// Instance-agnostic per-frame upsampler: stride 8 tokens to stride 2
/// feature maps, with the stride-4 stem tap added laterally.
pub fn spatial_decode(fw: &Forward, enc: &EncoderOutput, skip: &Tensor) -> Result<Tensor> {
    let d = enc.dims;
    let c = d.c;
    let grid = Tensor::concat(&enc.frame_tokens, 0)?
        .reshape(&[d.t, d.h, d.w, c])?
        .permute(&[0, 3, 1, 2])?;
    let expect_skip = [d.t, c / 2, d.h * 2, d.w * 2];
    if skip.shape() != expect_skip {
        return Err(Error::shape(
            "spatial_decode",
            format!("skip {:?}, expected {:?}", skip.shape(), expect_skip),
        ));
    }
    let up1 = grid
        .upsample_nearest_2x()?
        .conv2d(&fw.p("spat.up1.w")?, Some(&fw.p("spat.up1.b")?), 1, 1)?
        .relu()?;
    let lateral = skip.conv2d(&fw.p("spat.skip.w")?, Some(&fw.p("spat.skip.b")?), 1, 0)?;
    let fused = up1.add(&lateral)?;
    fused
        .upsample_nearest_2x()?
        .conv2d(&fw.p("spat.up2.w")?, Some(&fw.p("spat.up2.b")?), 1, 1)?
        .relu()
}

/// Convolve every frame's decoded features with each query's conditional
/// kernel in one shot: `mask[i](t) = features(t) . w_i + b_i`.
pub fn assemble_masks(features: &Tensor, cond_weights: &Tensor) -> Result<Tensor> {
    let fs = features.shape().to_vec();
    let ws = cond_weights.shape().to_vec();
    if fs.len() != 4 || ws.len() != 2 || ws[1] != fs[1] + 1 {
        return Err(Error::shape(
            "assemble_masks",
            format!("features {:?} vs weights {:?}", fs, ws),
        ));
    }
    let (t, cd, hp, wp) = (fs[0], fs[1], fs[2], fs[3]);
    let n_q = ws[0];
    let mut per_query = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let row = cond_weights.narrow(0, i, 1)?;
        let kernel = row.narrow(1, 0, cd)?.reshape(&[1, cd, 1, 1])?;
        let bias = row.narrow(1, cd, 1)?.reshape(&[1])?;
        let logits = features.conv2d(&kernel, Some(&bias), 1, 0)?;
        per_query.push(logits.reshape(&[1, t, hp, wp])?);
    }
    Tensor::concat(&per_query, 0)
}

/// Full decoder pass: embeddings, heads, spatial features, masks.
pub fn predict_clip(
    fw: &Forward,
    enc: &EncoderOutput,
    skip: &Tensor,
    cfg: &DecoderConfig,
) -> Result<ClipPrediction> {
    let embeddings = decode_queries(fw, enc, cfg)?;
    let class_probs = classification_head(fw, &embeddings)?;
    let cond_weights = segmentation_head(fw, &embeddings)?;
    let features = spatial_decode(fw, enc, skip)?;
    let mask_logits = assemble_masks(&features, &cond_weights)?;
    let ms = mask_logits.shape();
    Ok(ClipPrediction {
        t: ms[1],
        mask_h: ms[2],
        mask_w: ms[3],
        class_probs,
        cond_weights,
        mask_logits,
    })
}
