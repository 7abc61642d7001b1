//! Clip encoder: convolutional stem, memory-token attachment, and the four
//! communication types used for comparison — no communication, full
//! space-time attention, spatial/temporal decomposition, and memory-token
//! communication (Encode-Receive / Gather-Communicate blocks).
//!
//! Frame tokens carry a fixed 2-d spatial encoding; memory tokens carry a
//! learned per-slot embedding inside Encode-Receive and a temporal sinusoid
//! inside Gather-Communicate. Cross-frame positional terms (the temporal
//! sinusoid of the full and decomposed variants) and cross-frame mixing
//! stages are disabled for single-frame clips, which makes every baseline
//! collapse to the no-communication encoder exactly when T = 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{
    encoder_layer, encoder_layer_with_probs, ensure_encoder_layer, sinusoidal_1d, sinusoidal_2d,
    AttentionConfig, PosKind, PositionalEncoding,
};

/// Hard cap on joint space-time tokens for the full-attention baseline; the
/// probability matrix is quadratic in this count.
pub const FULL_THW_TOKEN_LIMIT: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryGrouping {
    /// One attention group per memory index, T tokens each.
    Decomposed,
    /// All M*T memory tokens in a single group.
    Unified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderVariant {
    NoComm,
    FullThw,
    DecomposeTHw,
    Ifc {
        memory_tokens: usize,
        grouping: MemoryGrouping,
    },
}

impl EncoderVariant {
    pub fn ifc(memory_tokens: usize) -> Self {
        EncoderVariant::Ifc {
            memory_tokens,
            grouping: MemoryGrouping::Decomposed,
        }
    }

    /// Memory tokens per frame (0 for the baselines).
    ///
    /// M = 0 with the ifc kind is the communication-suppressed ablation and
    /// is defined to match `NoComm` bit-exactly under shared parameters.
    pub fn memory_tokens(&self) -> usize {
        match self {
            EncoderVariant::Ifc { memory_tokens, .. } => *memory_tokens,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderVariant::NoComm => "no_comm",
            EncoderVariant::FullThw => "full_thw",
            EncoderVariant::DecomposeTHw => "decompose_t_hw",
            EncoderVariant::Ifc { .. } => "ifc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub attn: AttentionConfig,
    pub num_layers: usize,
    pub variant: EncoderVariant,
}

/// Clip extents after the stem: `h`/`w` are at stride 8, `m` is the number
/// of memory tokens per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m: usize,
}

impl ClipDims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Stem output: per-frame flattened tokens, per-frame memory tokens (copies
/// of the shared trainable initial state), and the stride-4 skip features.
#[derive(Debug)]
pub struct ClipEmbedding {
    pub frame_tokens: Vec<Tensor>,
    pub memory: Vec<Tensor>,
    pub skip: Tensor,
    pub dims: ClipDims,
}

#[derive(Debug)]
pub struct EncoderOutput {
    pub frame_tokens: Vec<Tensor>,
    pub memory: Vec<Tensor>,
    pub dims: ClipDims,
}

/// Mean-head attention of memory tokens over frame tokens, captured per
/// Encode-Receive layer and frame: `maps[layer][frame][slot]` holds H*W
/// weights.
pub struct AttentionMaps {
    pub maps: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    /// Skip Gather-Communicate (locality probes).
    pub suppress_gather: bool,
    /// Record memory-token attention maps.
    pub capture_attention: bool,
    /// Zero the temporal sinusoid everywhere (symmetry probes).
    pub zero_temporal_pos: bool,
}

pub fn ensure_stem(store: &mut ParamStore, c: usize) {
    let (c1, c2) = (c / 4, c / 2);
    store.ensure("stem.c1.w", &[c1, 3, 3, 3], Init::Glorot { fan_in: 27, fan_out: c1 * 9 });
    store.ensure("stem.c1.b", &[c1], Init::Zeros);
    store.ensure("stem.c2.w", &[c2, c1, 3, 3], Init::Glorot { fan_in: c1 * 9, fan_out: c2 * 9 });
    store.ensure("stem.c2.b", &[c2], Init::Zeros);
    store.ensure("stem.c3.w", &[c, c2, 3, 3], Init::Glorot { fan_in: c2 * 9, fan_out: c * 9 });
    store.ensure("stem.c3.b", &[c], Init::Zeros);
}

/// Create every parameter the chosen variant needs. Per-frame layer weights
/// share names across variants so ablations can run on one store.
pub fn ensure_encoder(store: &mut ParamStore, cfg: &EncoderConfig) {
    ensure_stem(store, cfg.attn.model_dim);
    for l in 0..cfg.num_layers {
        ensure_encoder_layer(store, &format!("enc.b{l}.frame"), &cfg.attn);
        match cfg.variant {
            EncoderVariant::DecomposeTHw => {
                ensure_encoder_layer(store, &format!("enc.b{l}.temporal"), &cfg.attn);
            }
            EncoderVariant::Ifc { memory_tokens, .. } if memory_tokens > 0 => {
                ensure_encoder_layer(store, &format!("enc.b{l}.comm"), &cfg.attn);
            }
            _ => {}
        }
    }
    let m = cfg.variant.memory_tokens();
    if m > 0 {
        store.ensure("enc.memory", &[m, cfg.attn.model_dim], Init::Uniform(1.0));
        store.ensure("enc.memory_pos", &[m, cfg.attn.model_dim], Init::Uniform(1.0));
    }
}

/// Frame-by-frame stem at stride 8 with a stride-4 skip tap; memory tokens
/// attached as per-frame copies of the shared initial state.
pub fn embed_clip(fw: &Forward, frames: &Tensor, cfg: &EncoderConfig) -> Result<ClipEmbedding> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(
            "embed_clip",
            format!("expected [t, 3, h0, w0], got {:?}", s),
        ));
    }
    let (t, h0, w0) = (s[0], s[2], s[3]);
    if t == 0 {
        return Err(Error::contract("embed_clip", "empty clip"));
    }
    if h0 % 8 != 0 || w0 % 8 != 0 {
        return Err(Error::contract(
            "embed_clip",
            format!(
                "resolution {}x{} not divisible by the stem stride; pad to {}x{}",
                h0,
                w0,
                h0.div_ceil(8) * 8,
                w0.div_ceil(8) * 8
            ),
        ));
    }
    let c = cfg.attn.model_dim;
    if c % 4 != 0 {
        return Err(Error::contract("embed_clip", "model_dim must be divisible by 4"));
    }

    let s1 = frames
        .conv2d(&fw.p("stem.c1.w")?, Some(&fw.p("stem.c1.b")?), 2, 1)?
        .relu()?;
    let skip = s1
        .conv2d(&fw.p("stem.c2.w")?, Some(&fw.p("stem.c2.b")?), 2, 1)?
        .relu()?;
    let s3 = skip
        .conv2d(&fw.p("stem.c3.w")?, Some(&fw.p("stem.c3.b")?), 2, 1)?
        .relu()?;

    let (h, w) = (h0 / 8, w0 / 8);
    let tokens = s3.permute(&[0, 2, 3, 1])?.reshape(&[t, h * w, c])?;
    let mut frame_tokens = Vec::with_capacity(t);
    for ti in 0..t {
        frame_tokens.push(tokens.narrow(0, ti, 1)?.reshape(&[h * w, c])?);
    }

    let m = cfg.variant.memory_tokens();
    let memory = if m > 0 {
        let m0 = fw.p("enc.memory")?;
        vec![m0; t]
    } else {
        Vec::new()
    };

    Ok(ClipEmbedding {
        frame_tokens,
        memory,
        skip,
        dims: ClipDims { t, h, w, c, m },
    })
}

fn temporal_pos(t: usize, c: usize, zeroed: bool) -> Result<PositionalEncoding> {
    if t <= 1 || zeroed {
        Ok(PositionalEncoding::zeros(PosKind::Temporal1d, t, c))
    } else {
        sinusoidal_1d(t, c)
    }
}

/// One Encode-Receive layer: the per-frame encoder layer over the fixed
/// `[frame tokens; memory tokens]` concatenation. No cross-frame data flow.
pub fn encode_receive(
    fw: &Forward,
    cfg: &EncoderConfig,
    layer_idx: usize,
    frames: &[Tensor],
    memory: &[Tensor],
    dims: &ClipDims,
    capture: bool,
) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Vec<Vec<f64>>>)> {
    let hw = dims.hw();
    let spatial = sinusoidal_2d(dims.h, dims.w, dims.c)?.leaf(fw.graph())?;
    let prefix = format!("enc.b{layer_idx}.frame");

    let pos = if dims.m > 0 {
        Tensor::concat(&[spatial, fw.p("enc.memory_pos")?], 0)?
    } else {
        spatial
    };

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut out_memory = Vec::with_capacity(frames.len());
    let mut maps = Vec::new();
    for (ti, f) in frames.iter().enumerate() {
        if f.shape() != [hw, dims.c] {
            return Err(Error::shape(
                "encode_receive",
                format!("frame tokens {:?}, expected [{}, {}]", f.shape(), hw, dims.c),
            ));
        }
        let tokens = if dims.m > 0 {
            Tensor::concat(&[f.clone(), memory[ti].clone()], 0)?
        } else {
            f.clone()
        };
        if capture && dims.m > 0 {
            let (out, probs) = encoder_layer_with_probs(fw, &prefix, &tokens, &pos, &cfg.attn)?;
            maps.push(memory_attention(&probs, hw, dims.m));
            out_frames.push(out.narrow(0, 0, hw)?);
            out_memory.push(out.narrow(0, hw, dims.m)?);
        } else {
            let out = encoder_layer(fw, &prefix, &tokens, &pos, &cfg.attn)?;
            if dims.m > 0 {
                out_frames.push(out.narrow(0, 0, hw)?);
                out_memory.push(out.narrow(0, hw, dims.m)?);
            } else {
                out_frames.push(out);
            }
        }
    }
    Ok((out_frames, out_memory, maps))
}

fn memory_attention(probs: &[Tensor], hw: usize, m: usize) -> Vec<Vec<f64>> {
    let heads = probs.len() as f64;
    let n = hw + m;
    let mut maps = vec![vec![0.0; hw]; m];
    for p in probs {
        p.with_data(|d| {
            for (slot, map) in maps.iter_mut().enumerate() {
                let row = (hw + slot) * n;
                for (x, v) in map.iter_mut().zip(&d[row..row + hw]) {
                    *x += v / heads;
                }
            }
        });
    }
    maps
}

/// One Gather-Communicate layer over per-frame memories, grouped by memory
/// index (or unified), outputs rewritten to their originating slots.
pub fn gather_communicate(
    fw: &Forward,
    cfg: &EncoderConfig,
    layer_idx: usize,
    memory: &[Tensor],
    dims: &ClipDims,
    grouping: MemoryGrouping,
    tpos: &PositionalEncoding,
) -> Result<Vec<Tensor>> {
    let (t, m, c) = (dims.t, dims.m, dims.c);
    if t == 0 || m == 0 {
        return Err(Error::contract("gather_communicate", "need t >= 1 and m >= 1"));
    }
    let prefix = format!("enc.b{layer_idx}.comm");
    match grouping {
        MemoryGrouping::Decomposed => {
            let pos = fw.graph().tensor(&[t, c], tpos.table.clone())?;
            // slot_rows[i][ti] is the updated token for slot i of frame ti.
            let mut slot_rows: Vec<Vec<Tensor>> = Vec::with_capacity(m);
            for i in 0..m {
                let rows: Vec<Tensor> = memory
                    .iter()
                    .map(|mt| mt.narrow(0, i, 1))
                    .collect::<Result<_>>()?;
                let group = Tensor::concat(&rows, 0)?;
                let out = encoder_layer(fw, &prefix, &group, &pos, &cfg.attn)?;
                let per_t: Vec<Tensor> = (0..t).map(|ti| out.narrow(0, ti, 1)).collect::<Result<_>>()?;
                slot_rows.push(per_t);
            }
            (0..t)
                .map(|ti| {
                    let slots: Vec<Tensor> = (0..m).map(|i| slot_rows[i][ti].clone()).collect();
                    Tensor::concat(&slots, 0)
                })
                .collect()
        }
        MemoryGrouping::Unified => {
            let all = Tensor::concat(memory, 0)?;
            let mut table = Vec::with_capacity(t * m * c);
            for ti in 0..t {
                for _ in 0..m {
                    table.extend_from_slice(tpos.row(ti));
                }
            }
            let pos = fw.graph().tensor(&[t * m, c], table)?;
            let out = encoder_layer(fw, &prefix, &all, &pos, &cfg.attn)?;
            (0..t).map(|ti| out.narrow(0, ti * m, m)).collect()
        }
    }
}

/// Encode-Receive followed by Gather-Communicate; frame tokens are left
/// untouched by the gather phase.
pub fn ifc_block(
    fw: &Forward,
    cfg: &EncoderConfig,
    layer_idx: usize,
    frames: &[Tensor],
    memory: &[Tensor],
    dims: &ClipDims,
    grouping: MemoryGrouping,
    opts: &EncodeOptions,
) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Vec<Vec<f64>>>)> {
    let (f, m, maps) = encode_receive(fw, cfg, layer_idx, frames, memory, dims, opts.capture_attention)?;
    if dims.m == 0 || opts.suppress_gather {
        return Ok((f, m, maps));
    }
    let tpos = temporal_pos(dims.t, dims.c, opts.zero_temporal_pos)?;
    let m = gather_communicate(fw, cfg, layer_idx, &m, dims, grouping, &tpos)?;
    Ok((f, m, maps))
}

pub fn encode_clip(fw: &Forward, emb: &ClipEmbedding, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    encode_clip_opts(fw, emb, cfg, &EncodeOptions::default()).map(|(out, _)| out)
}

/// Run the stacked encoder for the configured communication type.
pub fn encode_clip_opts(
    fw: &Forward,
    emb: &ClipEmbedding,
    cfg: &EncoderConfig,
    opts: &EncodeOptions,
) -> Result<(EncoderOutput, Option<AttentionMaps>)> {
    let dims = emb.dims;
    let (t, hw, c) = (dims.t, dims.hw(), dims.c);
    let mut all_maps = Vec::new();

    let out = match cfg.variant {
        EncoderVariant::NoComm | EncoderVariant::Ifc { .. } => {
            let grouping = match cfg.variant {
                EncoderVariant::Ifc { grouping, .. } => grouping,
                _ => MemoryGrouping::Decomposed,
            };
            let mut frames = emb.frame_tokens.clone();
            let mut memory = emb.memory.clone();
            for l in 0..cfg.num_layers {
                let (f, m, maps) = ifc_block(fw, cfg, l, &frames, &memory, &dims, grouping, opts)?;
                frames = f;
                memory = m;
                if opts.capture_attention {
                    all_maps.push(maps);
                }
            }
            EncoderOutput {
                frame_tokens: frames,
                memory,
                dims,
            }
        }
        EncoderVariant::DecomposeTHw => {
            let spatial = sinusoidal_2d(dims.h, dims.w, c)?;
            let tpos = temporal_pos(t, c, opts.zero_temporal_pos)?;
            let mut frames = emb.frame_tokens.clone();
            for l in 0..cfg.num_layers {
                let spos = spatial.leaf(fw.graph())?;
                let prefix = format!("enc.b{l}.frame");
                for f in frames.iter_mut() {
                    *f = encoder_layer(fw, &prefix, f, &spos, &cfg.attn)?;
                }
                // Cross-frame stage has nothing to mix on single-frame clips.
                if t > 1 {
                    let stacked = Tensor::concat(&frames, 0)?
                        .reshape(&[t, hw, c])?
                        .permute(&[1, 0, 2])?;
                    let tpos_leaf = fw.graph().tensor(&[t, c], tpos.table.clone())?;
                    let tprefix = format!("enc.b{l}.temporal");
                    let mut locs = Vec::with_capacity(hw);
                    for p in 0..hw {
                        let group = stacked.narrow(0, p, 1)?.reshape(&[t, c])?;
                        locs.push(encoder_layer(fw, &tprefix, &group, &tpos_leaf, &cfg.attn)?);
                    }
                    let back = Tensor::concat(&locs, 0)?
                        .reshape(&[hw, t, c])?
                        .permute(&[1, 0, 2])?;
                    frames = (0..t)
                        .map(|ti| back.narrow(0, ti, 1)?.reshape(&[hw, c]))
                        .collect::<Result<_>>()?;
                }
            }
            EncoderOutput {
                frame_tokens: frames,
                memory: Vec::new(),
                dims,
            }
        }
        EncoderVariant::FullThw => {
            if t * hw > FULL_THW_TOKEN_LIMIT {
                return Err(Error::contract(
                    "encode_clip",
                    format!(
                        "full space-time attention over {} tokens exceeds the supported limit {}; \
                         reduce T or the input resolution",
                        t * hw,
                        FULL_THW_TOKEN_LIMIT
                    ),
                ));
            }
            let spatial = sinusoidal_2d(dims.h, dims.w, c)?;
            let tpos = temporal_pos(t, c, opts.zero_temporal_pos)?;
            let mut table = Vec::with_capacity(t * hw * c);
            for ti in 0..t {
                for p in 0..hw {
                    table.extend(
                        spatial
                            .row(p)
                            .iter()
                            .zip(tpos.row(ti))
                            .map(|(s, tp)| s + tp),
                    );
                }
            }
            let pos = fw.graph().tensor(&[t * hw, c], table)?;
            let mut tokens = Tensor::concat(&emb.frame_tokens, 0)?;
            for l in 0..cfg.num_layers {
                tokens = encoder_layer(fw, &format!("enc.b{l}.frame"), &tokens, &pos, &cfg.attn)?;
            }
            let frames = (0..t)
                .map(|ti| tokens.narrow(0, ti * hw, hw))
                .collect::<Result<_>>()?;
            EncoderOutput {
                frame_tokens: frames,
                memory: Vec::new(),
                dims,
            }
        }
    };

    let maps = if opts.capture_attention {
        Some(AttentionMaps { maps: all_maps })
    } else {
        None
    };
    Ok((out, maps))
}
