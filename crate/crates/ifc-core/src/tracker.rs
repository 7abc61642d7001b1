//! Clip-to-video stitching: space-time soft IoU association of consecutive
//! clip prediction sets, Hungarian matching with a score threshold, and
//! track finalization.
//!
//! The association score pools intersection and union over all voxels of
//! the shared frames (one space-time sum), not a per-frame IoU average.
//! On overlapping frames the earlier clip's masks win by default.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::ClipPrediction;
use crate::error::{Error, Result};
use crate::matching::hungarian_max;

/// One filtered clip prediction entering association: a full category
/// distribution (argmax not the no-object class) and per-frame soft masks.
#[derive(Debug, Clone)]
pub struct ClipInstance {
    pub category_dist: Vec<f64>,
    pub confidence: f64,
    /// Soft masks, one per clip frame, each `mask_h * mask_w` long.
    pub masks: Vec<Vec<f64>>,
}

/// A stitched instance: soft masks per covered video frame plus the
/// category distributions and confidences of every contributing clip.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: usize,
    pub frames: BTreeMap<usize, Vec<f64>>,
    pub category_dists: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub clip_len: usize,
    pub stride: usize,
    /// Minimum association score to extend a track.
    pub tau: f64,
    /// Confidence floor applied when filtering clip predictions.
    pub min_confidence: f64,
    /// Average soft masks on overlap frames instead of keeping the
    /// existing track's masks.
    pub average_overlap: bool,
}

impl TrackerConfig {
    pub fn new(clip_len: usize, stride: usize, tau: f64) -> Result<Self> {
        if stride == 0 || stride > clip_len {
            return Err(Error::contract(
                "tracker_config",
                format!("need 1 <= stride <= clip_len, got S={} T={}", stride, clip_len),
            ));
        }
        Ok(TrackerConfig {
            clip_len,
            stride,
            tau,
            min_confidence: 0.05,
            average_overlap: false,
        })
    }
}

/// Final per-video instance: argmax category of the mean distribution over
/// clips, that mean probability as confidence, soft masks per covered frame.
#[derive(Debug, Clone)]
pub struct VideoInstance {
    pub id: usize,
    pub category: usize,
    pub confidence: f64,
    pub frames: BTreeMap<usize, Vec<f64>>,
}

impl VideoInstance {
    /// Binary mask for `frame`; empty (all false) when the track never
    /// covered it.
    pub fn binary_mask(&self, frame: usize, size: usize) -> Vec<bool> {
        match self.frames.get(&frame) {
            Some(soft) => soft.iter().map(|&p| p > 0.5).collect(),
            None => vec![false; size],
        }
    }
}

/// Pooled space-time soft IoU over already-paired frame masks:
/// `sum(a*b) / (sum a + sum b - sum(a*b))`.
pub fn soft_iou_spacetime(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract(
            "soft_iou_spacetime",
            "no intersecting frames; treat as no-match",
        ));
    }
    let mut inter = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::shape("soft_iou_spacetime", "mask size mismatch"));
        }
        for (x, y) in a.iter().zip(b.iter()) {
            inter += x * y;
            sum_a += x;
            sum_b += y;
        }
    }
    let union = sum_a + sum_b - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Keep predictions whose argmax category is a real class and whose
/// confidence clears the floor; masks become per-frame sigmoid probabilities.
pub fn filter_predictions(preds: &ClipPrediction, min_confidence: f64) -> Result<Vec<ClipInstance>> {
    let n_q = preds.class_probs.shape()[0];
    let classes = preds.class_probs.shape()[1];
    let empty = classes - 1;
    let probs = preds.class_probs.to_vec();
    let frame_sz = preds.mask_h * preds.mask_w;
    let mut out = Vec::new();
    preds.mask_logits.with_data(|logits| {
        for q in 0..n_q {
            let dist = &probs[q * classes..(q + 1) * classes];
            let (argmax, &best) = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty distribution");
            if argmax == empty || best < min_confidence {
                continue;
            }
            let base = q * preds.t * frame_sz;
            let masks = (0..preds.t)
                .map(|t| {
                    logits[base + t * frame_sz..base + (t + 1) * frame_sz]
                        .iter()
                        .map(|&l| 1.0 / (1.0 + (-l).exp()))
                        .collect()
                })
                .collect();
            out.push(ClipInstance {
                category_dist: dist.to_vec(),
                confidence: best,
                masks,
            });
        }
    });
    Ok(out)
}

#[derive(Debug)]
pub struct TrackStore {
    pub tracks: Vec<Track>,
    next_id: usize,
    cfg: TrackerConfig,
    last_range: Option<(usize, usize)>,
    clips_seen: usize,
}

impl TrackStore {
    pub fn new(cfg: TrackerConfig) -> Self {
        TrackStore {
            tracks: Vec::new(),
            next_id: 0,
            cfg,
            last_range: None,
            clips_seen: 0,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// True when exactly one clip covered the whole video: no matching ever
    /// ran and finalize is the identity over the decoder outputs.
    pub fn is_offline(&self) -> bool {
        self.clips_seen <= 1
    }

    /// Score matrix over active tracks x candidates; entries are pooled
    /// space-time soft IoU on shared frames, 0 without intersection.
    pub fn association_scores(&self, candidates: &[ClipInstance], range: (usize, usize)) -> Vec<f64> {
        let rows = self.tracks.len();
        let cols = candidates.len();
        let mut scores = vec![0.0; rows * cols];
        for (i, track) in self.tracks.iter().enumerate() {
            for (j, cand) in candidates.iter().enumerate() {
                let mut pairs = Vec::new();
                for f in range.0..range.1 {
                    if let Some(existing) = track.frames.get(&f) {
                        pairs.push((existing.as_slice(), cand.masks[f - range.0].as_slice()));
                    }
                }
                scores[i * cols + j] = soft_iou_spacetime(&pairs).unwrap_or(0.0);
            }
        }
        scores
    }

    fn open_track(&mut self, cand: ClipInstance, range: (usize, usize)) {
        let mut frames = BTreeMap::new();
        for (off, mask) in cand.masks.into_iter().enumerate() {
            frames.insert(range.0 + off, mask);
        }
        self.tracks.push(Track {
            id: self.next_id,
            frames,
            category_dists: vec![cand.category_dist],
            scores: vec![cand.confidence],
        });
        self.next_id += 1;
    }

    /// Consume one clip's candidates: Hungarian-match against active tracks,
    /// extend matches scoring at least tau, open new tracks for the rest.
    pub fn stitch(&mut self, candidates: Vec<ClipInstance>, range: (usize, usize)) -> Result<()> {
        if range.1 <= range.0 {
            return Err(Error::contract("stitch", "empty clip range"));
        }
        if let Some((ls, le)) = self.last_range {
            if range.0 <= ls || range.0 > le {
                return Err(Error::contract(
                    "stitch",
                    format!(
                        "clip [{}, {}) out of order after [{}, {}); clips must advance with overlap >= 0",
                        range.0, range.1, ls, le
                    ),
                ));
            }
        }
        for cand in &candidates {
            if cand.masks.len() != range.1 - range.0 {
                return Err(Error::shape("stitch", "candidate masks do not span the clip range"));
            }
        }
        self.clips_seen += 1;

        if self.tracks.is_empty() {
            for cand in candidates {
                self.open_track(cand, range);
            }
            self.last_range = Some(range);
            return Ok(());
        }

        let rows = self.tracks.len();
        let cols = candidates.len();
        let scores = self.association_scores(&candidates, range);
        // The solver wants rows <= cols; transpose when tracks outnumber
        // candidates.
        let mut matched_cand: Vec<Option<usize>> = vec![None; cols];
        if cols > 0 {
            if rows <= cols {
                let a = hungarian_max(&scores, rows, cols)?;
                for (ti, cj) in a.pairs {
                    if scores[ti * cols + cj] >= self.cfg.tau {
                        matched_cand[cj] = Some(ti);
                    }
                }
            } else {
                let mut t = vec![0.0; cols * rows];
                for i in 0..rows {
                    for j in 0..cols {
                        t[j * rows + i] = scores[i * cols + j];
                    }
                }
                let a = hungarian_max(&t, cols, rows)?;
                for (cj, ti) in a.pairs {
                    if scores[ti * cols + cj] >= self.cfg.tau {
                        matched_cand[cj] = Some(ti);
                    }
                }
            }
        }

        for (cj, cand) in candidates.into_iter().enumerate() {
            match matched_cand[cj] {
                Some(ti) => {
                    let track = &mut self.tracks[ti];
                    for (off, mask) in cand.masks.into_iter().enumerate() {
                        let f = range.0 + off;
                        match track.frames.get_mut(&f) {
                            Some(existing) if self.cfg.average_overlap => {
                                for (e, v) in existing.iter_mut().zip(mask) {
                                    *e = 0.5 * (*e + v);
                                }
                            }
                            Some(_) => {} // earlier clip keeps the frame
                            None => {
                                track.frames.insert(f, mask);
                            }
                        }
                    }
                    track.category_dists.push(cand.category_dist);
                    track.scores.push(cand.confidence);
                }
                None => self.open_track(cand, range),
            }
        }
        self.last_range = Some(range);
        Ok(())
    }

    /// Close the store: per track, the mean category distribution over its
    /// clips picks the category (argmax over real classes) and confidence.
    pub fn finalize(self) -> Vec<VideoInstance> {
        self.tracks
            .into_iter()
            .map(|t| {
                let n = t.category_dists.len() as f64;
                let classes = t.category_dists[0].len();
                let mut mean = vec![0.0; classes];
                for d in &t.category_dists {
                    for (m, v) in mean.iter_mut().zip(d) {
                        *m += v / n;
                    }
                }
                // Real classes only; the no-object slot is last.
                let (category, &confidence) = mean[..classes - 1]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("at least one real class");
                VideoInstance {
                    id: t.id,
                    category,
                    confidence,
                    frames: t.frames,
                }
            })
            .collect()
    }
}
