//! Bipartite assignment between predictions and ground truth, and the
//! clip-level training loss: probability + dice similarity, Hungarian
//! maximization, cross-entropy / dice / sigmoid-focal terms for matched
//! pairs, down-weighted no-object terms for the rest.
//!
//! Mask terms are pooled over the whole clip volume (one sum over
//! T x H' x W'), not per-frame averages. The assignment itself is treated
//! as a constant during differentiation.

use serde::{Deserialize, Serialize};

use crate::decoder::ClipPrediction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One annotated instance of a clip: category id (never the no-object
/// class) and a binary mask volume at prediction resolution.
#[derive(Debug, Clone)]
pub struct GroundTruthInstance {
    pub category: usize,
    pub mask: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GroundTruthInstance {
    pub fn new(category: usize, mask: Vec<f64>, t: usize, h: usize, w: usize) -> Result<Self> {
        if mask.len() != t * h * w {
            return Err(Error::shape(
                "ground_truth",
                format!("mask length {} vs {}x{}x{}", mask.len(), t, h, w),
            ));
        }
        if !mask.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::contract("ground_truth", "mask must be binary"));
        }
        if !mask.iter().any(|&v| v == 1.0) {
            return Err(Error::contract(
                "ground_truth",
                "instance has no positive voxel in this clip; exclude it upstream",
            ));
        }
        Ok(GroundTruthInstance { category, mask, t, h, w })
    }
}

/// Injective map from ground-truth to prediction indices; `negatives` are
/// the remaining predictions, ascending. Together they cover every
/// prediction exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Dice weight inside the matching similarity.
    pub match_dice: f64,
    /// Dice loss weight.
    pub dice: f64,
    /// Sigmoid-focal loss weight.
    pub focal: f64,
    /// Factor on the no-object loss sum.
    pub neg_downweight: f64,
    /// Smoothing added to both dice numerator and denominator.
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            match_dice: 1.0,
            dice: 1.0,
            focal: 1.0,
            neg_downweight: 0.1,
            dice_eps: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Mask,
    Box,
}

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA_IS_TWO: () = ();
const LOG_CLAMP: f64 = 1e-12;
/// Box cost when prediction and ground truth share no frame with pixels.
const NO_BOX_COST: f64 = 6.0;

/// Pooled dice coefficient over plain values:
/// `(2 sum(s*p) + eps) / (sum s + sum p + eps)`.
pub fn dice_value(gt: &[f64], probs: &[f64], eps: f64) -> Result<f64> {
    if gt.len() != probs.len() {
        return Err(Error::shape(
            "dice",
            format!("{} vs {} voxels", gt.len(), probs.len()),
        ));
    }
    let mut inter = 0.0;
    let mut sums = 0.0;
    for (s, p) in gt.iter().zip(probs) {
        inter += s * p;
        sums += s + p;
    }
    if sums + eps == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * inter + eps) / (sums + eps))
}

/// Differentiable pooled dice of a soft mask against a binary volume.
pub fn dice(gt: &[f64], probs: &Tensor, eps: f64) -> Result<Tensor> {
    if gt.len() != probs.numel() {
        return Err(Error::shape(
            "dice",
            format!("{} vs {} voxels", gt.len(), probs.numel()),
        ));
    }
    let g = probs.graph();
    let flat = probs.reshape(&[probs.numel()])?;
    let gt_leaf = g.tensor(&[gt.len()], gt.to_vec())?;
    let gt_sum: f64 = gt.iter().sum();
    let inter = flat.mul(&gt_leaf)?.sum_all()?;
    let denom = flat.sum_all()?.add_scalar(gt_sum + eps)?;
    inter.scale(2.0)?.add_scalar(eps)?.div(&denom)
}

/// Differentiable sigmoid-focal loss, mean over voxels, with alpha 0.25 and
/// gamma 2: `-alpha_t (1 - p_t)^2 log p_t`.
pub fn sigmoid_focal(gt: &[f64], logits: &Tensor) -> Result<Tensor> {
    if gt.len() != logits.numel() {
        return Err(Error::shape(
            "sigmoid_focal",
            format!("{} vs {} voxels", gt.len(), logits.numel()),
        ));
    }
    let _ = FOCAL_GAMMA_IS_TWO;
    let g = logits.graph();
    let n = gt.len();
    let flat = logits.reshape(&[n])?;
    let y = g.tensor(&[n], gt.to_vec())?;
    let one_minus_y = g.tensor(&[n], gt.iter().map(|v| 1.0 - v).collect())?;
    let alpha_t = g.tensor(
        &[n],
        gt.iter().map(|v| FOCAL_ALPHA * v + (1.0 - FOCAL_ALPHA) * (1.0 - v)).collect(),
    )?;
    let p = flat.sigmoid()?;
    let one_minus_p = p.neg()?.add_scalar(1.0)?;
    let p_t = p.mul(&y)?.add(&one_minus_p.mul(&one_minus_y)?)?;
    let om_pt = p_t.neg()?.add_scalar(1.0)?;
    let weight = alpha_t.mul(&om_pt.mul(&om_pt)?)?;
    weight.mul(&p_t.ln_clamped(LOG_CLAMP)?)?.neg()?.mean_all()
}

/// `-log probs[row, col]`, the cross-entropy of one categorical pick.
pub fn neg_log_prob(probs: &Tensor, row: usize, col: usize) -> Result<Tensor> {
    probs
        .narrow(0, row, 1)?
        .narrow(1, col, 1)?
        .reshape(&[1])?
        .ln_clamped(LOG_CLAMP)?
        .neg()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tight normalized box [x0, y0, x1, y1] of one frame's positive pixels.
fn frame_box(mask: &[f64], h: usize, w: usize, positive: impl Fn(f64) -> bool) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if positive(mask[y * w + x]) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    Some([
        x0 as f64 / w as f64,
        y0 as f64 / h as f64,
        (x1 + 1) as f64 / w as f64,
        (y1 + 1) as f64 / h as f64,
    ])
}

fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let ix0 = a[0].max(b[0]);
    let iy0 = a[1].max(b[1]);
    let ix1 = a[2].min(b[2]);
    let iy1 = a[3].min(b[3]);
    let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
    let union = area(a) + area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let cx0 = a[0].min(b[0]);
    let cy0 = a[1].min(b[1]);
    let cx1 = a[2].max(b[2]);
    let cy1 = a[3].max(b[3]);
    let c_area = (cx1 - cx0) * (cy1 - cy0);
    if c_area > 0.0 {
        iou - (c_area - union) / c_area
    } else {
        iou
    }
}

/// Clip-averaged box cost (L1 + 1 - gIoU) over frames where both masks have
/// pixels; frames with an empty mask on either side are skipped.
fn box_cost(gt: &GroundTruthInstance, logits: &[f64]) -> f64 {
    let fsz = gt.h * gt.w;
    let mut total = 0.0;
    let mut frames = 0usize;
    for t in 0..gt.t {
        let gt_box = frame_box(&gt.mask[t * fsz..(t + 1) * fsz], gt.h, gt.w, |v| v > 0.5);
        let pred_box = frame_box(&logits[t * fsz..(t + 1) * fsz], gt.h, gt.w, |v| v > 0.0);
        if let (Some(a), Some(b)) = (gt_box, pred_box) {
            let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            total += l1 + (1.0 - giou(&a, &b));
            frames += 1;
        }
    }
    if frames == 0 {
        NO_BOX_COST
    } else {
        total / frames as f64
    }
}

/// Pairwise similarity: `p_hat_j(c_i) + lambda0 * Dice` in mask mode, or the
/// probability minus the weighted box cost in box mode. Row-major K x N_q.
pub fn similarity_matrix(
    gts: &[GroundTruthInstance],
    preds: &ClipPrediction,
    weights: &LossWeights,
    mode: MatchMode,
) -> Result<Vec<f64>> {
    let n_q = preds.class_probs.shape()[0];
    let k = gts.len();
    if k > n_q {
        return Err(Error::contract(
            "similarity_matrix",
            format!("{} ground-truth instances exceed {} predictions", k, n_q),
        ));
    }
    let classes = preds.class_probs.shape()[1];
    let probs = preds.class_probs.to_vec();
    let voxels = preds.t * preds.mask_h * preds.mask_w;
    let mut scores = vec![0.0; k * n_q];
    preds.mask_logits.with_data(|logits| -> Result<()> {
        for (i, gt) in gts.iter().enumerate() {
            if gt.mask.len() != voxels {
                return Err(Error::shape(
                    "similarity_matrix",
                    format!("ground truth {} has {} voxels, predictions have {}", i, gt.mask.len(), voxels),
                ));
            }
            if gt.category + 1 >= classes {
                return Err(Error::contract(
                    "similarity_matrix",
                    format!("category {} out of range", gt.category),
                ));
            }
            for j in 0..n_q {
                let p = probs[j * classes + gt.category];
                let lg = &logits[j * voxels..(j + 1) * voxels];
                scores[i * n_q + j] = match mode {
                    MatchMode::Mask => {
                        let mut inter = 0.0;
                        let mut sums = 0.0;
                        for (s, &l) in gt.mask.iter().zip(lg) {
                            let q = sigmoid_scalar(l);
                            inter += s * q;
                            sums += s + q;
                        }
                        let d = (2.0 * inter + weights.dice_eps) / (sums + weights.dice_eps);
                        p + weights.match_dice * d
                    }
                    MatchMode::Box => p - weights.match_dice * box_cost(gt, lg),
                };
            }
        }
        Ok(())
    })?;
    Ok(scores)
}

/// Injective assignment maximizing the total score, exact for real scores.
/// `scores` is row-major K x N_q with K <= N_q.
pub fn hungarian_max(scores: &[f64], k: usize, n_q: usize) -> Result<Assignment> {
    if scores.len() != k * n_q {
        return Err(Error::shape("hungarian_max", "score matrix extent mismatch"));
    }
    if k > n_q {
        return Err(Error::contract("hungarian_max", "more rows than columns"));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::contract("hungarian_max", "scores must be finite"));
    }
    if k == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            negatives: (0..n_q).collect(),
        });
    }

    // Potentials-based shortest augmenting path on negated scores.
    let cost = |i: usize, j: usize| -scores[i * n_q + j];
    let (rows, cols) = (k, n_q);
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched = vec![0usize; cols + 1]; // matched[j] = row (1-based), 0 free
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = vec![(0usize, 0usize); rows];
    let mut taken = vec![false; cols];
    for j in 1..=cols {
        if matched[j] != 0 {
            pairs[matched[j] - 1] = (matched[j] - 1, j - 1);
            taken[j - 1] = true;
        }
    }
    let negatives = (0..cols).filter(|&j| !taken[j]).collect();
    Ok(Assignment { pairs, negatives })
}

/// Total loss for one clip under a fixed assignment, differentiable w.r.t.
/// class probabilities and mask logits. Negative terms are summed in
/// value-sorted order so prediction permutations reproduce the loss
/// bit-identically.
pub fn clip_loss(
    gts: &[GroundTruthInstance],
    preds: &ClipPrediction,
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<Tensor> {
    let g = preds.class_probs.graph();
    let voxels = preds.t * preds.mask_h * preds.mask_w;
    let empty_class = preds.class_probs.shape()[1] - 1;
    if assignment.pairs.len() != gts.len() {
        return Err(Error::contract("clip_loss", "assignment does not cover ground truth"));
    }

    let mut total = g.scalar(0.0)?;
    for &(i, j) in &assignment.pairs {
        let gt = &gts[i];
        let ce = neg_log_prob(&preds.class_probs, j, gt.category)?;
        let logits = preds.mask_logits.narrow(0, j, 1)?.reshape(&[voxels])?;
        let probs = logits.sigmoid()?;
        let dice_term = dice(&gt.mask, &probs, weights.dice_eps)?
            .neg()?
            .add_scalar(1.0)?
            .scale(weights.dice)?;
        let focal_term = sigmoid_focal(&gt.mask, &logits)?.scale(weights.focal)?;
        total = total.add(&ce)?.add(&dice_term)?.add(&focal_term)?;
    }

    if !assignment.negatives.is_empty() {
        let mut neg_terms: Vec<(f64, Tensor)> = assignment
            .negatives
            .iter()
            .map(|&j| {
                let t = neg_log_prob(&preds.class_probs, j, empty_class)?;
                Ok((t.scalar()?, t))
            })
            .collect::<Result<_>>()?;
        neg_terms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut neg_sum = g.scalar(0.0)?;
        for (_, t) in neg_terms {
            neg_sum = neg_sum.add(&t)?;
        }
        total = total.add(&neg_sum.scale(weights.neg_downweight)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make_preds(g: &Graph, probs: Vec<f64>, n_q: usize, classes: usize, logits: Vec<f64>, t: usize, h: usize, w: usize) -> ClipPrediction {
        ClipPrediction {
            class_probs: g.tensor(&[n_q, classes], probs).unwrap(),
            cond_weights: g.zeros(&[n_q, 2]).unwrap(),
            mask_logits: g.tensor(&[n_q, t, h, w], logits).unwrap(),
            t,
            mask_h: h,
            mask_w: w,
        }
    }

    #[test]
    fn dice_hand_values() {
        // Identical binary masks: exactly 1 for any smoothing.
        let m = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(dice_value(&m, &m, 0.0).unwrap(), 1.0);
        assert_eq!(dice_value(&m, &m, 1.0).unwrap(), 1.0);
        // Disjoint non-empty masks.
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        assert_eq!(dice_value(&a, &b, 0.0).unwrap(), 0.0);
        assert!(dice_value(&a, &b, 1.0).unwrap() < 0.21);
        // Half overlap: 2*1/(2+2).
        let c = vec![1.0, 0.0, 1.0, 0.0];
        assert_eq!(dice_value(&a, &c, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn dice_tape_matches_value_path() {
        let g = Graph::new();
        let gt = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let soft = vec![0.9, 0.2, 0.7, 0.1, 0.4, 0.6];
        let probs = g.tensor(&[6], soft.clone()).unwrap();
        let d = dice(&gt, &probs, 1.0).unwrap().scalar().unwrap();
        assert!((d - dice_value(&gt, &soft, 1.0).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn focal_hand_values() {
        let g = Graph::new();
        // One voxel, y=1, p=0.5: 0.25 * 0.25 * ln 2.
        let l = g.tensor(&[1], vec![0.0]).unwrap();
        let f = sigmoid_focal(&[1.0], &l).unwrap().scalar().unwrap();
        assert!((f - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        // y=0, p=0.5: 0.75 * 0.25 * ln 2.
        let f0 = sigmoid_focal(&[0.0], &l).unwrap().scalar().unwrap();
        assert!((f0 - 0.75 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        // Perfect confident prediction.
        let sharp = g.tensor(&[2], vec![30.0, -30.0]).unwrap();
        let fp = sigmoid_focal(&[1.0, 0.0], &sharp).unwrap().scalar().unwrap();
        assert!(fp < 1e-6);
    }

    #[test]
    fn loss_terms_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let gt: Vec<f64> = (0..8).map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 }).collect();
            let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eval = |xs: &[f64], which: usize| -> (f64, Vec<f64>) {
                let g = Graph::new();
                let l = g.param(&[8], xs.to_vec()).unwrap();
                let loss = match which {
                    0 => dice(&gt, &l.sigmoid().unwrap(), 1.0).unwrap(),
                    _ => sigmoid_focal(&gt, &l).unwrap(),
                };
                let v = loss.scalar().unwrap();
                g.backward(&loss).unwrap();
                (v, l.grad().unwrap())
            };
            for which in 0..2 {
                let (_, grad) = eval(&x0, which);
                for i in 0..8 {
                    let mut plus = x0.clone();
                    plus[i] += 1e-5;
                    let mut minus = x0.clone();
                    minus[i] -= 1e-5;
                    let fd = (eval(&plus, which).0 - eval(&minus, which).0) / 2e-5;
                    let rel = (grad[i] - fd).abs() / (grad[i].abs() + 1e-8);
                    assert!(rel < 1e-4, "term {} coord {}: {} vs {}", which, i, grad[i], fd);
                }
            }
        }
    }

    #[test]
    fn similarity_formula() {
        let g = Graph::eval();
        // One GT (category 0), two predictions over 1x1x5 volumes.
        // Pred 0: p=0.9, mask [1,1,1,0,0] vs gt [1,1,0,0,0]: dice 0.8.
        let gt = GroundTruthInstance::new(0, vec![1.0, 1.0, 0.0, 0.0, 0.0], 1, 1, 5).unwrap();
        let big = 40.0;
        let logits = vec![big, big, big, -big, -big, -big, -big, -big, -big, -big];
        let preds = make_preds(&g, vec![0.9, 0.1, 0.2, 0.8], 2, 2, logits, 1, 1, 5);
        let w = LossWeights { dice_eps: 0.0, ..Default::default() };
        let s = similarity_matrix(&[gt], &preds, &w, MatchMode::Mask).unwrap();
        assert!((s[0] - 1.7).abs() < 1e-9, "{}", s[0]);
        // Pred 1: empty mask, dice 2*0/(2+0) = 0 -> score = p only.
        assert!((s[1] - 0.2).abs() < 1e-9, "{}", s[1]);
    }

    #[test]
    fn similarity_identical_predictions_identical_columns() {
        let g = Graph::eval();
        let gt = GroundTruthInstance::new(0, vec![1.0, 0.0, 0.0, 1.0], 1, 2, 2).unwrap();
        let logits = vec![0.3, -0.2, 0.8, 0.1];
        let mut all = logits.clone();
        all.extend_from_slice(&logits);
        let preds = make_preds(&g, vec![0.5, 0.5, 0.5, 0.5], 2, 2, all, 1, 2, 2);
        let s = similarity_matrix(&[gt], &preds, &LossWeights::default(), MatchMode::Mask).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn similarity_rejects_oversubscribed_clip() {
        let g = Graph::eval();
        let gt = GroundTruthInstance::new(0, vec![1.0], 1, 1, 1).unwrap();
        let preds = make_preds(&g, vec![1.0, 0.0], 1, 2, vec![0.0], 1, 1, 1);
        let err = similarity_matrix(&[gt.clone(), gt], &preds, &LossWeights::default(), MatchMode::Mask);
        assert!(err.is_err());
    }

    #[test]
    fn box_mode_prefers_matching_extents() {
        let g = Graph::eval();
        // GT occupies the left half; pred 0 matches it, pred 1 is the right half.
        let gt_mask = vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let gt = GroundTruthInstance::new(0, gt_mask.clone(), 1, 4, 4).unwrap();
        let big = 30.0;
        let left: Vec<f64> = gt_mask.iter().map(|&v| if v > 0.5 { big } else { -big }).collect();
        let right: Vec<f64> = gt_mask.iter().rev().map(|&v| if v > 0.5 { big } else { -big }).collect();
        let mut logits = left;
        logits.extend(right);
        let preds = make_preds(&g, vec![0.5, 0.5, 0.5, 0.5], 2, 2, logits, 1, 4, 4);
        let s = similarity_matrix(&[gt], &preds, &LossWeights::default(), MatchMode::Box).unwrap();
        assert!(s[0] > s[1]);
        // Exact box match costs zero: score equals the class probability.
        assert!((s[0] - 0.5).abs() < 1e-9);
    }

    fn brute_force_max(scores: &[f64], k: usize, n: usize) -> f64 {
        fn rec(scores: &[f64], k: usize, n: usize, i: usize, used: u32) -> f64 {
            if i == k {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..n {
                if used & (1 << j) == 0 {
                    let v = scores[i * n + j] + rec(scores, k, n, i + 1, used | (1 << j));
                    if v > best {
                        best = v;
                    }
                }
            }
            best
        }
        rec(scores, k, n, 0, 0)
    }

    #[test]
    fn hungarian_hand_cases() {
        // Diagonal dominance keeps the identity assignment.
        let s = vec![9.0, 1.0, 1.0, 1.0, 9.0, 1.0, 1.0, 1.0, 9.0];
        let a = hungarian_max(&s, 3, 3).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.negatives.is_empty());

        // [[1,2],[2,1]] -> cross assignment, total 4 (verified by the 2!
        // enumeration below).
        let s = vec![1.0, 2.0, 2.0, 1.0];
        let a = hungarian_max(&s, 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(brute_force_max(&s, 2, 2), 4.0);
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..200 {
            let k = 1 + trial % 6;
            let n = k + rng.random_range(0..3).min(8 - k);
            let scores: Vec<f64> = (0..k * n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = hungarian_max(&scores, k, n).unwrap();
            let total: f64 = a.pairs.iter().map(|&(i, j)| scores[i * n + j]).sum();
            let best = brute_force_max(&scores, k, n);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {}: {} vs {}",
                trial,
                total,
                best
            );
            // Injectivity and full coverage.
            let mut seen = vec![false; n];
            for &(_, j) in &a.pairs {
                assert!(!seen[j]);
                seen[j] = true;
            }
            assert_eq!(a.pairs.len() + a.negatives.len(), n);
        }
    }

    fn one_gt_two_pred_case(g: &Graph) -> (Vec<GroundTruthInstance>, ClipPrediction) {
        let gt = GroundTruthInstance::new(1, vec![1.0, 1.0, 0.0, 0.0], 1, 2, 2).unwrap();
        // classes: 2 real + empty.
        let probs = vec![0.2, 0.7, 0.1, 0.1, 0.2, 0.7];
        let logits = vec![2.0, 1.0, -1.0, -2.0, 0.5, -0.5, 0.3, -0.3];
        (vec![gt], make_preds(g, probs, 2, 3, logits, 1, 2, 2))
    }

    #[test]
    fn clip_loss_hand_case() {
        let g = Graph::new();
        let (gts, preds) = one_gt_two_pred_case(&g);
        let w = LossWeights::default();
        let scores = similarity_matrix(&gts, &preds, &w, MatchMode::Mask).unwrap();
        let a = hungarian_max(&scores, 1, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let loss = clip_loss(&gts, &preds, &a, &w).unwrap().scalar().unwrap();

        // Hand computation with the same formulas.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p: Vec<f64> = [2.0, 1.0, -1.0, -2.0].iter().map(|&x| sig(x)).collect();
        let ce = -(0.7f64).ln();
        let inter = p[0] + p[1];
        let sums = 2.0 + p.iter().sum::<f64>();
        let dice_l = 1.0 - (2.0 * inter + 1.0) / (sums + 1.0);
        let y = [1.0, 1.0, 0.0, 0.0];
        let mut focal = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let pt = if yi > 0.5 { p[i] } else { 1.0 - p[i] };
            let at = if yi > 0.5 { 0.25 } else { 0.75 };
            focal += -at * (1.0 - pt) * (1.0 - pt) * pt.ln();
        }
        focal /= 4.0;
        let neg = -(0.7f64).ln() * 0.1;
        let expect = ce + dice_l + focal + neg;
        assert!((loss - expect).abs() < 1e-10, "{} vs {}", loss, expect);
    }

    #[test]
    fn clip_loss_all_matched_has_no_negative_term() {
        let g = Graph::new();
        let gt0 = GroundTruthInstance::new(0, vec![1.0, 0.0], 1, 1, 2).unwrap();
        let gt1 = GroundTruthInstance::new(1, vec![0.0, 1.0], 1, 1, 2).unwrap();
        let preds = make_preds(
            &g,
            vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1],
            2,
            3,
            vec![3.0, -3.0, -3.0, 3.0],
            1,
            1,
            2,
        );
        let w = LossWeights::default();
        let scores = similarity_matrix(&[gt0.clone(), gt1.clone()], &preds, &w, MatchMode::Mask).unwrap();
        let a = hungarian_max(&scores, 2, 2).unwrap();
        assert!(a.negatives.is_empty());
        let loss = clip_loss(&[gt0, gt1], &preds, &a, &w).unwrap().scalar().unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn clip_loss_perfect_predictions_vanish() {
        let g = Graph::new();
        let gt = GroundTruthInstance::new(0, vec![1.0, 1.0, 0.0, 0.0], 1, 2, 2).unwrap();
        let big = 40.0;
        let preds = make_preds(
            &g,
            vec![1.0 - 1e-9, 1e-9, 1e-9, 1.0 - 1e-9],
            2,
            2,
            vec![big, big, -big, -big, -big, -big, -big, -big],
            1,
            2,
            2,
        );
        // dice_eps = 0 so a perfect mask scores exactly 1.
        let w = LossWeights { dice_eps: 0.0, ..Default::default() };
        let scores = similarity_matrix(&[gt.clone()], &preds, &w, MatchMode::Mask).unwrap();
        let a = hungarian_max(&scores, 1, 2).unwrap();
        let loss = clip_loss(&[gt], &preds, &a, &w).unwrap().scalar().unwrap();
        assert!(loss < 1e-4, "{}", loss);
    }

    #[test]
    fn prediction_permutation_keeps_loss_bits() {
        let g = Graph::new();
        let gt = GroundTruthInstance::new(0, vec![1.0, 1.0, 0.0, 0.0], 1, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_q = 5;
        let probs_rows: Vec<Vec<f64>> = (0..n_q)
            .map(|_| {
                let a: f64 = rng.random_range(0.05..0.9);
                let b = rng.random_range(0.0..1.0 - a);
                vec![a, b, 1.0 - a - b]
            })
            .collect();
        let logit_rows: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let perm = [3usize, 1, 4, 0, 2];

        let run = |order: &[usize]| {
            let probs: Vec<f64> = order.iter().flat_map(|&i| probs_rows[i].clone()).collect();
            let logits: Vec<f64> = order.iter().flat_map(|&i| logit_rows[i].clone()).collect();
            let preds = make_preds(&g, probs, n_q, 3, logits, 1, 2, 2);
            let w = LossWeights::default();
            let s = similarity_matrix(&[gt.clone()], &preds, &w, MatchMode::Mask).unwrap();
            let a = hungarian_max(&s, 1, n_q).unwrap();
            clip_loss(&[gt.clone()], &preds, &a, &w).unwrap().scalar().unwrap()
        };

        let base = run(&[0, 1, 2, 3, 4]);
        let permuted = run(&perm);
        assert_eq!(base.to_bits(), permuted.to_bits());
    }

    #[test]
    fn pooled_dice_differs_from_per_frame_average() {
        // Prediction perfect on frame 0, empty on frame 1; GT present in both.
        let gt = vec![1.0, 1.0, 1.0, 1.0];
        let pred = vec![1.0, 1.0, 0.0, 0.0];
        let pooled = dice_value(&gt, &pred, 0.0).unwrap();
        assert!((pooled - 2.0 / 3.0).abs() < 1e-12);
        // The per-frame average would be (1.0 + 0.0) / 2; the pooled value
        // is deliberately different.
        let per_frame = (dice_value(&gt[..2], &pred[..2], 0.0).unwrap()
            + dice_value(&gt[2..], &pred[2..], 0.0).unwrap())
            / 2.0;
        assert!((per_frame - 0.5).abs() < 1e-12);
        assert!((pooled - per_frame).abs() > 0.1);
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruthInstance::new(0, vec![0.0, 0.0], 1, 1, 2).is_err());
        assert!(GroundTruthInstance::new(0, vec![0.5, 1.0], 1, 1, 2).is_err());
        assert!(GroundTruthInstance::new(0, vec![1.0], 1, 1, 2).is_err());
    }
}
