use ifc_core::eval::EvalConfig;
use ifc_core::matching::{clip_loss, hungarian_max, similarity_matrix, LossWeights, MatchMode, Assignment};
use ifc_core::model::{clip_pixels, Mode, Model, ModelConfig};
use ifc_core::synth::{generate, sample_scene, ClipWindow, DatasetSpec};
use ifc_core::train::{clip_ground_truth, evaluate_model, sample_batch, train_step, AdamW, EvalProtocol, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let lr_stem: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let dropout: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let neg_w: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);

    let dspec = DatasetSpec { train_videos: 60, eval_videos: 12, ..Default::default() };
    let train: Vec<_> = (0..dspec.train_videos).map(|i| generate(&sample_scene(&dspec, 100 + i as u64)).unwrap()).collect();
    let evalv: Vec<_> = (0..dspec.eval_videos).map(|i| generate(&sample_scene(&dspec, 9000 + i as u64)).unwrap()).collect();

    let mut loss_w = LossWeights::default();
    loss_w.neg_downweight = neg_w;
    let cfg = TrainConfig {
        model: ModelConfig { dropout, ..Default::default() },
        batch_size: batch,
        lr_stem,
        total_steps: steps,
        seed: 1,
        loss: loss_w,
        ..Default::default()
    };
    let mut model = Model::init(cfg.model, cfg.seed).unwrap();
    let mut opt = AdamW::new();
    let t0 = Instant::now();
    for step in 0..steps {
        let b = sample_batch(&cfg, &train, step).unwrap();
        let stats = train_step(&mut model, &mut opt, &cfg, &b, step).unwrap();
        if step % 50 == 0 {
            println!("step {} loss {:.4} ({:.2} s/step)", step, stats.loss, t0.elapsed().as_secs_f64() / (step + 1) as f64);
        }
        if (step + 1) % 200 == 0 { inspect(&model, &train[0], &cfg); }
    }
    let r = evaluate_model(&model, &evalv, &EvalProtocol::default(), &EvalConfig::default()).unwrap();
    println!("final eval: AP {:.3} AP50 {:.3} AR10 {:.3}", r.ap, r.ap50, r.ar10);
}

fn inspect(model: &Model, video: &ifc_core::synth::AnnotatedVideo, cfg: &TrainConfig) {
    let window = ClipWindow { start: 0, frame_indices: (0..5).collect(), padded: false };
    let pixels = clip_pixels(&video.frames, &window.frame_indices, video.h, video.w, false);
    let gts = clip_ground_truth(video, &window, false);
    let (_fw, pred) = model.forward(&pixels, 5, video.h, video.w, Mode::Eval).unwrap();
    let probs = pred.class_probs.to_vec();
    let classes = pred.class_probs.shape()[1];
    let nq = pred.class_probs.shape()[0];
    // Query summary.
    let mut lines = Vec::new();
    for q in 0..nq {
        let row = &probs[q * classes..(q + 1) * classes];
        let (am, &p) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        lines.push(format!("q{}:{}@{:.2}", q, if am == classes - 1 { "e".to_string() } else { am.to_string() }, p));
    }
    println!("  queries: {}", lines.join(" "));
    // Mask area stats for the best non-empty query.
    pred.mask_logits.with_data(|lg| {
        let vox = pred.t * pred.mask_h * pred.mask_w;
        for q in 0..nq.min(3) {
            let pos = lg[q * vox..(q + 1) * vox].iter().filter(|&&v| v > 0.0).count();
            println!("  q{} positive voxels {}/{}", q, pos, vox);
        }
    });
    // Loss breakdown at the matched assignment.
    let w = &cfg.loss;
    let scores = similarity_matrix(&gts, &pred, w, MatchMode::Mask).unwrap();
    let a: Assignment = hungarian_max(&scores, gts.len(), nq).unwrap();
    println!("  K={} matched to {:?}", gts.len(), a.pairs);
    let only_pos = LossWeights { neg_downweight: 0.0, ..*w };
    let lp = clip_loss(&gts, &pred, &a, &only_pos).unwrap().scalar().unwrap();
    let all = clip_loss(&gts, &pred, &a, w).unwrap().scalar().unwrap();
    println!("  L_pos={:.4} L_neg_weighted={:.4}", lp, all - lp);
}
