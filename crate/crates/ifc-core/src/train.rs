//! Training loop and evaluation pipeline: decoupled-weight-decay adaptive
//! optimization over per-clip losses, deterministic batch sampling,
//! single-file checkpoints, and clip-split -> stitch -> AP evaluation.
//!
//! Every random draw derives from `(seed, step, slot)`, so a fixed seed
//! reproduces the loss curve bit-identically, including across resume and
//! regardless of the worker thread count (per-clip gradients reduce in clip
//! order).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalGt, EvalInstance, EvalResult, VideoEval};
use crate::matching::{clip_loss, hungarian_max, similarity_matrix, GroundTruthInstance, LossWeights, MatchMode};
use crate::model::{clip_pixels, Mode, Model, ModelConfig};
use crate::params::{Param, ParamStore};
use crate::synth::{downsample_mask, split_clips, AnnotatedVideo, ClipWindow};
use crate::tracker::{filter_predictions, ClipInstance, TrackStore, TrackerConfig, VideoInstance};

/// Ratio between input resolution and prediction mask resolution.
pub const MASK_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub clip_len: usize,
    pub stride: usize,
    pub tau: f64,
    pub min_confidence: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            clip_len: 5,
            stride: 1,
            tau: 0.5,
            min_confidence: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub clip_len: usize,
    pub batch_size: usize,
    pub lr_transformer: f64,
    pub lr_stem: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// The learning rate decays by 10x once, at this fraction of training.
    pub lr_decay_at: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub match_mode: MatchMode,
    pub loss: LossWeights,
    pub hflip_prob: f64,
    pub checkpoint_every: usize,
    pub threads: usize,
    pub eval: EvalProtocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            clip_len: 5,
            batch_size: 8,
            lr_transformer: 1e-4,
            lr_stem: 1e-5,
            weight_decay: 1e-4,
            total_steps: 2000,
            lr_decay_at: 0.75,
            grad_clip: 0.1,
            seed: 0,
            match_mode: MatchMode::Mask,
            loss: LossWeights::default(),
            hflip_prob: 0.5,
            checkpoint_every: 500,
            threads: 1,
            eval: EvalProtocol::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_transformer <= 0.0 || self.lr_stem <= 0.0 {
            return Err(Error::contract("train_config", "learning rates must be positive"));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.clip_len == 0 {
            return Err(Error::contract("train_config", "steps, batch and clip length must be positive"));
        }
        if !(0.0..1.0).contains(&self.lr_decay_at) {
            return Err(Error::contract("train_config", "decay point must fall before the last step"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::contract("train_config", "flip probability outside [0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, base: f64) -> f64 {
        let decay_step = (self.lr_decay_at * self.total_steps as f64).floor() as usize;
        if step >= decay_step {
            base * 0.1
        } else {
            base
        }
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for v in [a, b] {
        h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    }
    h
}

/// AdamW: decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the provided gradients. Returns the pre-clip global
    /// gradient norm. `lr_for` maps a parameter name to its learning rate.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_for: impl Fn(&str) -> f64,
        weight_decay: f64,
        grad_clip: f64,
    ) -> Result<f64> {
        let mut sq = 0.0;
        for g in grads.values() {
            for v in g {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
        let scale = if grad_clip > 0.0 && norm > grad_clip {
            grad_clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::contract("adamw", format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let lr = lr_for(name);
            for i in 0..grad.len() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / b1t) / ((v[i] / b2t).sqrt() + self.eps);
                param.data[i] -= lr * (update + weight_decay * param.data[i]);
            }
        }
        Ok(norm)
    }
}

/// One training sample: clip pixels plus its ground truth at mask
/// resolution.
pub struct ClipSample {
    pub pixels: Vec<f64>,
    pub t: usize,
    pub h0: usize,
    pub w0: usize,
    pub gts: Vec<GroundTruthInstance>,
    pub clip_id: String,
}

/// Ground truth of one clip window at prediction resolution; instances
/// without a positive voxel in the window are excluded.
pub fn clip_ground_truth(video: &AnnotatedVideo, window: &ClipWindow, flip: bool) -> Vec<GroundTruthInstance> {
    let (hp, wp) = (video.h / MASK_STRIDE, video.w / MASK_STRIDE);
    let t = window.frame_indices.len();
    video
        .instances
        .iter()
        .filter_map(|inst| {
            let mut volume = Vec::with_capacity(t * hp * wp);
            for &fi in &window.frame_indices {
                let mask = if flip {
                    let mut m = vec![false; video.h * video.w];
                    for y in 0..video.h {
                        for x in 0..video.w {
                            m[y * video.w + x] = inst.masks[fi][y * video.w + (video.w - 1 - x)];
                        }
                    }
                    downsample_mask(&m, video.h, video.w, MASK_STRIDE)
                } else {
                    downsample_mask(&inst.masks[fi], video.h, video.w, MASK_STRIDE)
                };
                volume.extend(mask);
            }
            GroundTruthInstance::new(inst.category, volume, t, hp, wp).ok()
        })
        .collect()
}

/// Deterministically sample one batch for `step`.
pub fn sample_batch(cfg: &TrainConfig, data: &[AnnotatedVideo], step: usize) -> Result<Vec<ClipSample>> {
    if data.is_empty() {
        return Err(Error::contract("sample_batch", "empty training set"));
    }
    let mut out = Vec::with_capacity(cfg.batch_size);
    for k in 0..cfg.batch_size {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64, k as u64));
        let vi = rng.random_range(0..data.len());
        let video = &data[vi];
        let t = cfg.clip_len.min(video.num_frames());
        let start = rng.random_range(0..=video.num_frames() - t);
        let flip = rng.random_range(0.0..1.0) < cfg.hflip_prob;
        let window = ClipWindow {
            start,
            frame_indices: (start..start + t).collect(),
            padded: false,
        };
        let pixels = clip_pixels(&video.frames, &window.frame_indices, video.h, video.w, flip);
        out.push(ClipSample {
            pixels,
            t,
            h0: video.h,
            w0: video.w,
            gts: clip_ground_truth(video, &window, flip),
            clip_id: format!("step{}_v{}_f{}", step, vi, start),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn clip_forward_loss(
    model: &Model,
    cfg: &TrainConfig,
    sample: &ClipSample,
    step: usize,
    slot: usize,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let seed = mix_seed(cfg.seed, (step as u64) << 20 | slot as u64, 0x5eed);
    let (fw, pred) = model.forward(&sample.pixels, sample.t, sample.h0, sample.w0, Mode::Train { seed })?;
    let scores = similarity_matrix(&sample.gts, &pred, &cfg.loss, cfg.match_mode)?;
    let assignment = hungarian_max(&scores, sample.gts.len(), model.config.num_queries)?;
    let loss = clip_loss(&sample.gts, &pred, &assignment, &cfg.loss)?;
    let value = loss.scalar()?;
    if !value.is_finite() {
        return Err(Error::numeric(format!("non-finite loss on clip {}", sample.clip_id)));
    }
    fw.graph().backward(&loss)?;
    Ok((value, fw.grads()))
}

/// Forward/backward over the batch, gradient averaging, one optimizer
/// update. Per-clip work may run on `cfg.threads` workers; results reduce
/// in clip order so the outcome is thread-count independent.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    batch: &[ClipSample],
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::contract("train_step", "empty batch"));
    }
    let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = if cfg.threads <= 1 {
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| clip_forward_loss(model, cfg, s, step, k))
            .collect()
    } else {
        let model_ref = &*model;
        let mut slots: Vec<Option<Result<(f64, BTreeMap<String, Vec<f64>>)>>> =
            (0..batch.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slot_cells: Vec<std::sync::Mutex<Option<Result<(f64, BTreeMap<String, Vec<f64>>)>>>> =
            (0..batch.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..cfg.threads.min(batch.len()) {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if k >= batch.len() {
                        break;
                    }
                    let r = clip_forward_loss(model_ref, cfg, &batch[k], step, k);
                    *slot_cells[k].lock().unwrap() = Some(r);
                });
            }
        });
        for (dst, cell) in slots.iter_mut().zip(slot_cells) {
            *dst = cell.into_inner().unwrap();
        }
        slots.into_iter().map(|s| s.expect("worker finished")).collect()
    };

    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let (value, g) = r?;
        total_loss += value * scale;
        for (name, gv) in g {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(gv) {
                        *a += v * scale;
                    }
                }
                None => {
                    let mut gv = gv;
                    for v in gv.iter_mut() {
                        *v *= scale;
                    }
                    grads.insert(name, gv);
                }
            }
        }
    }

    let lr_t = cfg.lr_at(step, cfg.lr_transformer);
    let lr_s = cfg.lr_at(step, cfg.lr_stem);
    let grad_norm = opt.apply(
        &mut model.params,
        &grads,
        |name| if name.starts_with("stem.") { lr_s } else { lr_t },
        cfg.weight_decay,
        cfg.grad_clip,
    )?;
    Ok(StepStats {
        step,
        loss: total_loss,
        lr: lr_t,
        grad_norm,
    })
}

// Checkpoint format: magic "IFCL", u32 version, u64 manifest length,
// JSON manifest, then raw little-endian f64 payloads.
const CKPT_MAGIC: &[u8; 4] = b"IFCL";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    step: usize,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: &AdamW, cfg: &TrainConfig, step: usize) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push = |name: &str, kind: &str, shape: Vec<usize>, data: &[f64], tensors: &mut Vec<TensorEntry>, payload: &mut Vec<f64>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind: kind.to_string(),
            shape,
            offset: payload.len(),
            len: data.len(),
        });
        payload.extend_from_slice(data);
    };
    for (name, p) in model.params.iter() {
        push(name, "param", p.shape.clone(), &p.data, &mut tensors, &mut payload);
    }
    for (name, m) in &opt.m {
        push(name, "adam_m", vec![m.len()], m, &mut tensors, &mut payload);
    }
    for (name, v) in &opt.v {
        push(name, "adam_v", vec![v.len()], v, &mut tensors, &mut payload);
    }
    let manifest = serde_json::to_vec(&CheckpointManifest {
        step,
        config: cfg.clone(),
        tensors,
    })?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    for v in &payload {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(io)?;
    let manifest_len = u64::from_le_bytes(len8) as usize;
    let mut manifest_buf = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_buf).map_err(io)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_buf)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if rest.len() % 8 != 0 {
        return Err(Error::format("checkpoint", "truncated payload"));
    }
    let payload: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut params = ParamStore::new(manifest.config.seed);
    let mut opt = AdamW::new();
    for e in &manifest.tensors {
        let data = payload
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {} out of payload bounds", e.name)))?
            .to_vec();
        match e.kind.as_str() {
            "param" => params.insert(e.name.clone(), Param { shape: e.shape.clone(), data }),
            "adam_m" => {
                opt.m.insert(e.name.clone(), data);
            }
            "adam_v" => {
                opt.v.insert(e.name.clone(), data);
            }
            other => return Err(Error::format("checkpoint", format!("unknown tensor kind {other}"))),
        }
    }
    opt.step = manifest.step;
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config,
        params,
        optimizer: opt,
    })
}

/// Memory-token attention maps captured for one clip window.
pub struct ClipAttention {
    pub range: (usize, usize),
    /// layer -> frame -> memory slot -> H*W weights.
    pub maps: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Predictions for one video: per clip window, forward in eval mode,
/// no-object filtering, stitching; padded window tails are dropped.
pub fn track_video(model: &Model, video: &AnnotatedVideo, proto: &EvalProtocol) -> Result<Vec<VideoInstance>> {
    track_video_opts(model, video, proto, false).map(|(tracks, _)| tracks)
}

/// As [`track_video`], optionally capturing memory-token attention maps.
pub fn track_video_opts(
    model: &Model,
    video: &AnnotatedVideo,
    proto: &EvalProtocol,
    capture_attention: bool,
) -> Result<(Vec<VideoInstance>, Vec<ClipAttention>)> {
    let n = video.num_frames();
    let t = proto.clip_len.min(n);
    let s = proto.stride.min(t);
    let windows = split_clips(n, t, s)?;
    let mut store = TrackStore::new(TrackerConfig {
        clip_len: t,
        stride: s,
        tau: proto.tau,
        min_confidence: proto.min_confidence,
        average_overlap: false,
    });
    let mut attention = Vec::new();
    for window in &windows {
        let pixels = clip_pixels(&video.frames, &window.frame_indices, video.h, video.w, false);
        let opts = crate::encoder::EncodeOptions {
            capture_attention,
            ..Default::default()
        };
        let (_fw, pred, maps) = model.forward_opts(
            &pixels,
            window.frame_indices.len(),
            video.h,
            video.w,
            Mode::Eval,
            &opts,
        )?;
        let range = window.range(n);
        if let Some(m) = maps {
            attention.push(ClipAttention {
                range,
                maps: m.maps,
            });
        }
        let mut candidates = filter_predictions(&pred, proto.min_confidence)?;
        let real = range.1 - range.0;
        for c in candidates.iter_mut() {
            c.masks.truncate(real);
        }
        store.stitch(candidates, range)?;
    }
    Ok((store.finalize(), attention))
}

/// Build the evaluator's ground truth for one video at mask resolution;
/// instances never visible in the video are skipped.
pub fn eval_ground_truth(video: &AnnotatedVideo) -> Vec<EvalGt> {
    video
        .instances
        .iter()
        .filter_map(|inst| {
            let masks: Vec<Vec<bool>> = inst
                .masks
                .iter()
                .map(|m| {
                    downsample_mask(m, video.h, video.w, MASK_STRIDE)
                        .into_iter()
                        .map(|v| v > 0.5)
                        .collect()
                })
                .collect();
            if masks.iter().any(|m: &Vec<bool>| m.iter().any(|&b| b)) {
                Some(EvalGt {
                    category: inst.category,
                    masks,
                })
            } else {
                None
            }
        })
        .collect()
}

pub fn tracks_to_eval(tracks: &[VideoInstance], num_frames: usize, mask_len: usize) -> Vec<EvalInstance> {
    tracks
        .iter()
        .map(|t| EvalInstance {
            id: t.id,
            category: t.category,
            confidence: t.confidence,
            masks: (0..num_frames).map(|f| t.binary_mask(f, mask_len)).collect(),
        })
        .collect()
}

/// Full evaluation: per video tracking then the AP suite.
pub fn evaluate_model(
    model: &Model,
    videos: &[AnnotatedVideo],
    proto: &EvalProtocol,
    eval_cfg: &EvalConfig,
) -> Result<EvalResult> {
    let mut per_video = Vec::with_capacity(videos.len());
    for video in videos {
        let tracks = track_video(model, video, proto)?;
        let mask_len = (video.h / MASK_STRIDE) * (video.w / MASK_STRIDE);
        per_video.push(VideoEval {
            predictions: tracks_to_eval(&tracks, video.num_frames(), mask_len),
            ground_truth: eval_ground_truth(video),
        });
    }
    evaluate(&per_video, eval_cfg)
}

/// Ground-truth-as-prediction harness: bypasses the model, feeding exact
/// (downsampled) masks through the clip split and stitching machinery.
pub fn ground_truth_passthrough(video: &AnnotatedVideo, t: usize, s: usize, tau: f64) -> Result<Vec<VideoInstance>> {
    let n = video.num_frames();
    let t = t.min(n);
    let s = s.min(t);
    let windows = split_clips(n, t, s)?;
    let mut store = TrackStore::new(TrackerConfig {
        clip_len: t,
        stride: s,
        tau,
        min_confidence: 0.05,
        average_overlap: false,
    });
    let classes = 4; // three shape categories plus the no-object slot
    for window in &windows {
        let range = window.range(n);
        let mut candidates = Vec::new();
        for inst in &video.instances {
            let masks: Vec<Vec<f64>> = (range.0..range.1)
                .map(|f| downsample_mask(&inst.masks[f], video.h, video.w, MASK_STRIDE))
                .collect();
            if masks.iter().all(|m| m.iter().all(|&v| v == 0.0)) {
                continue;
            }
            let mut dist = vec![0.0; classes];
            dist[inst.category] = 1.0;
            candidates.push(ClipInstance {
                category_dist: dist,
                confidence: 1.0,
                masks,
            });
        }
        store.stitch(candidates, range)?;
    }
    Ok(store.finalize())
}
