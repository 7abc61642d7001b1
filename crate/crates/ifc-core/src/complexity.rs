//! Analytic multiply-add models for the four encoder communication types,
//! dimension sweeps, and cross-validation against the instrumented ledger.
//!
//! One encoder layer over N tokens costs
//! `4 N C^2` (q/k/v/out projections) + `2 N^2 C` (score and value matmuls,
//! summed over heads) + `2 N C F` (two FFN matmuls). Only matmul terms are
//! counted, matching the tensor ledger convention, so the analytic and
//! instrumented sides agree exactly rather than approximately. The
//! decomposed variant's temporal stage is modeled as zero at T = 1 because
//! the encoder skips it there.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_clip, ensure_encoder, ClipDims, ClipEmbedding, EncoderConfig, EncoderVariant,
    MemoryGrouping,
};
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::AttentionConfig;

/// Token budget accepted by the instrumented cross-check for the full
/// space-time variant.
pub const VALIDATE_FULL_THW_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub heads: usize,
}

impl EncoderDims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Multiply-add totals with the per-term breakdown; `total` equals the sum
/// of the parts exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub variant: String,
    pub dims: EncoderDims,
    pub total: u128,
    pub proj: u128,
    pub attn: u128,
    pub ffn: u128,
    pub gather: u128,
}

struct LayerTerms {
    proj: u128,
    attn: u128,
    ffn: u128,
}

impl LayerTerms {
    fn total(&self) -> u128 {
        self.proj + self.attn + self.ffn
    }
}

/// One standard encoder layer over `n` tokens.
fn layer(n: usize, c: usize, f: usize) -> LayerTerms {
    let (n, c, f) = (n as u128, c as u128, f as u128);
    LayerTerms {
        proj: 4 * n * c * c,
        attn: 2 * n * n * c,
        ffn: 2 * n * c * f,
    }
}

fn scaled(t: &LayerTerms, k: usize) -> LayerTerms {
    LayerTerms {
        proj: t.proj * k as u128,
        attn: t.attn * k as u128,
        ffn: t.ffn * k as u128,
    }
}

fn add(a: &mut LayerTerms, b: &LayerTerms) {
    a.proj += b.proj;
    a.attn += b.attn;
    a.ffn += b.ffn;
}

/// Exact multiply-add counts for `variant` at `dims`.
pub fn analytic_flops(variant: EncoderVariant, dims: &EncoderDims) -> FlopReport {
    let (c, t, hw, f) = (dims.c, dims.t, dims.hw(), dims.ffn_dim);
    let mut terms = LayerTerms { proj: 0, attn: 0, ffn: 0 };
    let mut gather: u128 = 0;
    if t > 0 && hw > 0 {
        match variant {
            EncoderVariant::NoComm => {
                terms = scaled(&layer(hw, c, f), t);
            }
            EncoderVariant::FullThw => {
                terms = layer(t * hw, c, f);
            }
            EncoderVariant::DecomposeTHw => {
                terms = scaled(&layer(hw, c, f), t);
                if t > 1 {
                    add(&mut terms, &scaled(&layer(t, c, f), hw));
                }
            }
            EncoderVariant::Ifc { memory_tokens: m, grouping } => {
                terms = scaled(&layer(hw + m, c, f), t);
                if m > 0 {
                    gather = match grouping {
                        MemoryGrouping::Decomposed => scaled(&layer(t, c, f), m).total(),
                        MemoryGrouping::Unified => layer(m * t, c, f).total(),
                    };
                }
            }
        }
    }
    let layers = dims.num_layers as u128;
    FlopReport {
        variant: variant.name().to_string(),
        dims: *dims,
        total: (terms.total() + gather) * layers,
        proj: terms.proj * layers,
        attn: terms.attn * layers,
        ffn: terms.ffn * layers,
        gather: gather * layers,
    }
}

/// Execute the encoder on random tokens at `dims` and compare the ledger's
/// matmul count against the analytic model. Returns the relative error.
pub fn validate_against_instrumented(variant: EncoderVariant, dims: &EncoderDims) -> Result<f64> {
    if matches!(variant, EncoderVariant::FullThw) && dims.t * dims.hw() > VALIDATE_FULL_THW_LIMIT {
        return Err(Error::contract(
            "validate_against_instrumented",
            format!(
                "full_thw validation limited to T*HW <= {}, got {}",
                VALIDATE_FULL_THW_LIMIT,
                dims.t * dims.hw()
            ),
        ));
    }
    let attn = AttentionConfig::new(dims.c, dims.heads, dims.ffn_dim, 0.0)?;
    let cfg = EncoderConfig {
        attn,
        num_layers: dims.num_layers,
        variant,
    };
    let mut store = ParamStore::new(1234);
    ensure_encoder(&mut store, &cfg);

    let fw = Forward::eval(&store);
    let g = fw.graph();
    let hw = dims.hw();
    let frame_tokens: Vec<Tensor> = (0..dims.t)
        .map(|ti| {
            g.tensor(
                &[hw, dims.c],
                (0..hw * dims.c)
                    .map(|i| ((i + ti * 31) as f64 * 0.37).sin() * 0.1)
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let m = variant.memory_tokens();
    let memory: Vec<Tensor> = if m > 0 {
        (0..dims.t).map(|_| fw.p("enc.memory")).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let emb = ClipEmbedding {
        frame_tokens,
        memory,
        skip: g.zeros(&[1, 1, 1, 1])?,
        dims: ClipDims {
            t: dims.t,
            h: dims.h,
            w: dims.w,
            c: dims.c,
            m,
        },
    };

    g.flop_reset();
    encode_clip(&fw, &emb, &cfg)?;
    let measured = g.flop_snapshot().matmul;
    let predicted = analytic_flops(variant, dims).total;
    if measured == 0 && predicted == 0 {
        return Ok(0.0);
    }
    if measured == 0 {
        return Err(Error::contract(
            "validate_against_instrumented",
            "instrumented count is zero while the model predicts work",
        ));
    }
    let diff = predicted.abs_diff(measured) as f64;
    Ok(diff / measured as f64)
}

/// Grid definition for sweeps; `resolutions` are input sizes whose token
/// extents are ceil(side / 32), the encoder stride of the modeled setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub channels: Vec<usize>,
    pub clip_lengths: Vec<usize>,
    pub resolutions: Vec<[usize; 2]>,
    pub ffn_dim: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub memory_tokens: usize,
}

impl SweepGrid {
    /// The comparison grid from the modeled setting: C=256, two input
    /// resolutions, T in {5, 36}.
    pub fn reference_grid() -> Self {
        SweepGrid {
            channels: vec![256],
            clip_lengths: vec![5, 36],
            resolutions: vec![[360, 640], [720, 1280]],
            ffn_dim: 2048,
            heads: 8,
            num_layers: 3,
            memory_tokens: 8,
        }
    }

    pub fn dims_for(&self, c: usize, t: usize, res: [usize; 2]) -> EncoderDims {
        EncoderDims {
            c,
            t,
            h: res[0].div_ceil(32),
            w: res[1].div_ceil(32),
            m: self.memory_tokens,
            num_layers: self.num_layers,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
        }
    }
}

/// One report per (config, variant) in deterministic order.
pub fn sweep(variants: &[EncoderVariant], grid: &SweepGrid) -> Result<Vec<FlopReport>> {
    if variants.is_empty() {
        return Err(Error::contract("sweep", "no variants requested"));
    }
    if grid.channels.is_empty() || grid.clip_lengths.is_empty() || grid.resolutions.is_empty() {
        return Err(Error::contract("sweep", "empty dimension grid"));
    }
    let mut out = Vec::new();
    for &c in &grid.channels {
        for &res in &grid.resolutions {
            for &t in &grid.clip_lengths {
                for &v in variants {
                    out.push(analytic_flops(v, &grid.dims_for(c, t, res)));
                }
            }
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str =
    "variant,C,T,H,W,M,layers,flops_total,flops_proj,flops_attn,flops_ffn,flops_gather";

pub fn to_csv(reports: &[FlopReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.dims.c,
            r.dims.t,
            r.dims.h,
            r.dims.w,
            r.dims.m,
            r.dims.num_layers,
            r.total,
            r.proj,
            r.attn,
            r.ffn,
            r.gather
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(c: usize, t: usize, h: usize, w: usize, m: usize, layers: usize, ffn: usize) -> EncoderDims {
        EncoderDims {
            c,
            t,
            h,
            w,
            m,
            num_layers: layers,
            ffn_dim: ffn,
            heads: 2,
        }
    }

    #[test]
    fn zero_extents_cost_nothing() {
        for v in [EncoderVariant::NoComm, EncoderVariant::FullThw, EncoderVariant::ifc(8)] {
            assert_eq!(analytic_flops(v, &dims(4, 0, 2, 2, 1, 1, 8)).total, 0);
            assert_eq!(analytic_flops(v, &dims(4, 2, 0, 0, 1, 1, 8)).total, 0);
        }
    }

    #[test]
    fn hand_evaluated_small_case() {
        // L(N) = 4 N 16 + 2 N^2 4 + 2 N 4 8 = 128 N + 8 N^2 at C=4, F=8.
        // no_comm, T=2, HW=4: 2 * L(4) = 2 * (512 + 128) = 1280.
        let d = dims(4, 2, 2, 2, 1, 1, 8);
        assert_eq!(analytic_flops(EncoderVariant::NoComm, &d).total, 1280);
        // ifc, M=1: E = 2 * L(5) = 2 * (640 + 200) = 1680,
        // G = 1 * L(2) = 256 + 32 = 288, total 1968.
        let r = analytic_flops(EncoderVariant::ifc(1), &d);
        assert_eq!(r.total, 1968);
        assert_eq!(r.gather, 288);
        // full, T*HW = 8: L(8) = 1024 + 512 = 1536.
        assert_eq!(analytic_flops(EncoderVariant::FullThw, &d).total, 1536);
        // decompose: 1280 + HW * L(2) = 1280 + 4 * 288 = 2432.
        assert_eq!(analytic_flops(EncoderVariant::DecomposeTHw, &d).total, 2432);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let d = dims(16, 3, 4, 5, 4, 2, 32);
        for v in [
            EncoderVariant::NoComm,
            EncoderVariant::FullThw,
            EncoderVariant::DecomposeTHw,
            EncoderVariant::ifc(4),
        ] {
            let r = analytic_flops(v, &d);
            assert_eq!(r.total, r.proj + r.attn + r.ffn + r.gather, "{}", r.variant);
        }
    }

    #[test]
    fn doubling_channels_quadruples_projection_term() {
        let d1 = dims(32, 2, 3, 3, 2, 1, 64);
        let mut d2 = d1;
        d2.c = 64;
        for v in [EncoderVariant::NoComm, EncoderVariant::FullThw] {
            let r1 = analytic_flops(v, &d1);
            let r2 = analytic_flops(v, &d2);
            assert_eq!(r2.proj, 4 * r1.proj);
        }
    }

    #[test]
    fn monotone_in_every_dimension() {
        let base = dims(16, 3, 4, 4, 2, 2, 32);
        let variants = [
            EncoderVariant::NoComm,
            EncoderVariant::FullThw,
            EncoderVariant::DecomposeTHw,
            EncoderVariant::ifc(2),
        ];
        for v in variants {
            let t0 = analytic_flops(v, &base).total;
            for bump in 0..5 {
                let mut d = base;
                match bump {
                    0 => d.c *= 2,
                    1 => d.t += 1,
                    2 => d.h += 1,
                    3 => d.num_layers += 1,
                    _ => d.ffn_dim += 16,
                }
                assert!(
                    analytic_flops(v, &d).total >= t0,
                    "{} not monotone in dim {}",
                    v.name(),
                    bump
                );
            }
        }
    }

    #[test]
    fn reference_grid_ratio_and_ordering() {
        let grid = SweepGrid::reference_grid();
        // 360x640 -> 12x20 tokens (240), T=5, M=8.
        let d = grid.dims_for(256, 5, [360, 640]);
        assert_eq!(d.hw(), 240);
        let ifc = analytic_flops(EncoderVariant::ifc(8), &d).total as f64;
        let none = analytic_flops(EncoderVariant::NoComm, &d).total as f64;
        let ratio = ifc / none;
        assert!((1.03..=1.10).contains(&ratio), "ratio {}", ratio);

        for res in [[360usize, 640usize], [720, 1280]] {
            let d36 = grid.dims_for(256, 36, res);
            let nc = analytic_flops(EncoderVariant::NoComm, &d36).total;
            let ic = analytic_flops(EncoderVariant::ifc(8), &d36).total;
            let de = analytic_flops(EncoderVariant::DecomposeTHw, &d36).total;
            let fu = analytic_flops(EncoderVariant::FullThw, &d36).total;
            assert!(nc < ic && ic < de && de < fu, "{:?}: {} {} {} {}", res, nc, ic, de, fu);
        }
    }

    #[test]
    fn growth_shapes_over_clip_length() {
        let grid = SweepGrid::reference_grid();
        let at = |v: EncoderVariant, t: usize| {
            analytic_flops(v, &grid.dims_for(256, t, [360, 640])).total as f64
        };
        let full1 = at(EncoderVariant::FullThw, 1);
        let ifc1 = at(EncoderVariant::ifc(8), 1);
        let mut prev_ratio = 0.0;
        for t in 2..=64 {
            let r = at(EncoderVariant::FullThw, t) / (t as f64 * full1);
            assert!(r > prev_ratio, "full_thw growth not superlinear at T={}", t);
            prev_ratio = r;
            let ri = at(EncoderVariant::ifc(8), t) / (t as f64 * ifc1);
            assert!((0.85..=1.15).contains(&ri), "ifc deviates from linear at T={}: {}", t, ri);
        }
        // At T=64 the full-attention cost per frame is several times the
        // single-frame cost; linear growth would keep this ratio at 1.
        assert!(prev_ratio > 2.0, "final excess ratio {}", prev_ratio);
    }

    #[test]
    fn sweep_rows_and_csv() {
        let grid = SweepGrid::reference_grid();
        let variants = [
            EncoderVariant::NoComm,
            EncoderVariant::FullThw,
            EncoderVariant::DecomposeTHw,
            EncoderVariant::ifc(8),
        ];
        let rows = sweep(&variants, &grid).unwrap();
        assert_eq!(rows.len(), 16);
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 17);

        let single = SweepGrid {
            channels: vec![8],
            clip_lengths: vec![2],
            resolutions: vec![[32, 32]],
            ..grid
        };
        assert_eq!(sweep(&variants, &single).unwrap().len(), 4);
        assert!(sweep(&[], &single).is_err());
    }

    #[test]
    fn instrumented_matches_analytic_at_toy_dims() {
        let toy = EncoderDims {
            c: 8,
            t: 3,
            h: 2,
            w: 2,
            m: 2,
            num_layers: 2,
            ffn_dim: 16,
            heads: 2,
        };
        for v in [
            EncoderVariant::NoComm,
            EncoderVariant::FullThw,
            EncoderVariant::DecomposeTHw,
            EncoderVariant::Ifc { memory_tokens: 2, grouping: MemoryGrouping::Decomposed },
            EncoderVariant::Ifc { memory_tokens: 2, grouping: MemoryGrouping::Unified },
        ] {
            let err = validate_against_instrumented(v, &toy).unwrap();
            assert!(err < 0.01, "{}: relative error {}", v.name(), err);
        }
    }

    #[test]
    fn zero_layer_config_validates_to_zero() {
        let d = dims(8, 2, 2, 2, 2, 0, 16);
        let err = validate_against_instrumented(EncoderVariant::ifc(2), &d).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn validation_refuses_oversized_full_attention() {
        let d = dims(8, 40, 16, 16, 0, 1, 16);
        let err = validate_against_instrumented(EncoderVariant::FullThw, &d).unwrap_err();
        assert!(err.to_string().contains("4096"), "{err}");
    }
}
