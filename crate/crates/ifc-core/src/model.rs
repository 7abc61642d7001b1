//! Whole-pipeline assembly: one config and parameter store covering stem,
//! encoder, decoder and heads, with forward passes over raw clip pixels.

use serde::{Deserialize, Serialize};

use crate::decoder::{ensure_decoder, predict_clip, ClipPrediction, DecoderConfig};
use crate::encoder::{
    embed_clip, encode_clip_opts, ensure_encoder, AttentionMaps, EncodeOptions, EncoderConfig,
    EncoderVariant,
};
use crate::error::Result;
use crate::params::{Forward, ParamStore};
use crate::transformer::AttentionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub decoder_channels: usize,
    pub variant: EncoderVariant,
    pub dropout: f64,
    pub include_memory_keys: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            heads: 4,
            ffn_dim: 256,
            enc_layers: 3,
            dec_layers: 3,
            num_queries: 20,
            num_classes: 3,
            decoder_channels: 16,
            variant: EncoderVariant::ifc(8),
            dropout: 0.1,
            include_memory_keys: true,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self, dropout: f64) -> Result<AttentionConfig> {
        AttentionConfig::new(self.channels, self.heads, self.ffn_dim, dropout)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            attn: self.attention(self.dropout)?,
            num_layers: self.enc_layers,
            variant: self.variant,
        })
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        Ok(DecoderConfig {
            attn: self.attention(self.dropout)?,
            num_layers: self.dec_layers,
            num_queries: self.num_queries,
            num_classes: self.num_classes,
            decoder_channels: self.decoder_channels,
            include_memory_keys: self.include_memory_keys,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Create all parameters for the configured variant; values depend only
    /// on `(seed, name)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut params = ParamStore::new(seed);
        ensure_encoder(&mut params, &config.encoder()?);
        ensure_decoder(&mut params, &config.decoder()?);
        Ok(Model { config, params })
    }

    /// Wrap an existing parameter store (checkpoint restore).
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Model {
        Model { config, params }
    }

    /// Full forward over one clip of `[t, 3, h0, w0]` pixels in [0, 1].
    pub fn forward(&self, pixels: &[f64], t: usize, h0: usize, w0: usize, mode: Mode) -> Result<(Forward<'_>, ClipPrediction)> {
        let (fw, pred, _) = self.forward_opts(pixels, t, h0, w0, mode, &EncodeOptions::default())?;
        Ok((fw, pred))
    }

    pub fn forward_opts(
        &self,
        pixels: &[f64],
        t: usize,
        h0: usize,
        w0: usize,
        mode: Mode,
        opts: &EncodeOptions,
    ) -> Result<(Forward<'_>, ClipPrediction, Option<AttentionMaps>)> {
        let fw = match mode {
            Mode::Train { seed } => Forward::train(&self.params, seed, self.config.dropout),
            Mode::Eval => Forward::eval(&self.params),
        };
        let frames = fw.graph().tensor(&[t, 3, h0, w0], pixels.to_vec())?;
        let enc_cfg = EncoderConfig {
            attn: self.config.attention(fw.dropout_rate())?,
            num_layers: self.config.enc_layers,
            variant: self.config.variant,
        };
        let emb = embed_clip(&fw, &frames, &enc_cfg)?;
        let (enc_out, maps) = encode_clip_opts(&fw, &emb, &enc_cfg, opts)?;
        let mut dec_cfg = self.config.decoder()?;
        dec_cfg.attn = enc_cfg.attn;
        let pred = predict_clip(&fw, &enc_out, &emb.skip, &dec_cfg)?;
        Ok((fw, pred, maps))
    }
}

/// Gather clip pixels (normalized to [0, 1]) from stored RGB8 frames by
/// window indices; optionally mirrored horizontally.
pub fn clip_pixels(frames: &[Vec<u8>], indices: &[usize], h: usize, w: usize, flip: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * 3 * h * w);
    for &fi in indices {
        let frame = &frames[fi];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    out.push(frame[(y * w + sx) * 3 + ch] as f64 / 255.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            heads: 2,
            ffn_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            num_queries: 4,
            num_classes: 3,
            decoder_channels: 2,
            variant: EncoderVariant::ifc(2),
            dropout: 0.1,
            include_memory_keys: true,
        }
    }

    fn ramp_pixels(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i % 255) as f64 / 255.0).collect()
    }

    #[test]
    fn forward_shapes() {
        let model = Model::init(tiny_config(), 5).unwrap();
        let pixels = ramp_pixels(2 * 3 * 16 * 16);
        let (_fw, pred) = model.forward(&pixels, 2, 16, 16, Mode::Eval).unwrap();
        assert_eq!(pred.class_probs.shape(), &[4, 4]);
        assert_eq!(pred.cond_weights.shape(), &[4, 3]);
        assert_eq!(pred.mask_logits.shape(), &[4, 2, 8, 8]);
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let model = Model::init(tiny_config(), 6).unwrap();
        let pixels = ramp_pixels(3 * 3 * 16 * 16);
        let run = |seed| {
            let (_fw, pred) = model
                .forward(&pixels, 3, 16, 16, Mode::Train { seed })
                .unwrap();
            pred.mask_logits.to_vec()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn same_seed_models_share_parameters() {
        let a = Model::init(tiny_config(), 7).unwrap();
        let mut cfg_b = tiny_config();
        cfg_b.variant = EncoderVariant::NoComm;
        let b = Model::init(cfg_b, 7).unwrap();
        // Shared names (stem, frame layers, decoder) have identical values.
        for (name, pa) in a.params.iter() {
            if let Some(pb) = b.params.get(name) {
                assert_eq!(pa.data, pb.data, "{name}");
            }
        }
    }

    #[test]
    fn clip_pixels_flip_mirrors_columns() {
        let h = 2;
        let w = 3;
        let frame: Vec<u8> = (0..h * w * 3).map(|i| i as u8).collect();
        let plain = clip_pixels(&[frame.clone()], &[0], h, w, false);
        let flipped = clip_pixels(&[frame], &[0], h, w, true);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let a = plain[ch * h * w + y * w + x];
                    let b = flipped[ch * h * w + y * w + (w - 1 - x)];
                    assert_eq!(a, b);
                }
            }
        }
    }
}
