use ifc_core::model::{Mode, Model, ModelConfig};
use ifc_core::matching::{clip_loss, hungarian_max, similarity_matrix, GroundTruthInstance, LossWeights, MatchMode};
use ifc_core::synth::{generate, sample_scene, DatasetSpec};
use ifc_core::train::{clip_ground_truth, MASK_STRIDE};
use ifc_core::synth::ClipWindow;
use ifc_core::model::clip_pixels;
use std::time::Instant;

fn main() {
    let dspec = DatasetSpec::default();
    let video = generate(&sample_scene(&dspec, 3)).unwrap();
    let window = ClipWindow { start: 0, frame_indices: (0..5).collect(), padded: false };
    let pixels = clip_pixels(&video.frames, &window.frame_indices, video.h, video.w, false);
    let gts = clip_ground_truth(&video, &window, false);
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    let _ = MASK_STRIDE;

    // Eval-mode forward.
    let t0 = Instant::now();
    for _ in 0..3 { model.forward(&pixels, 5, 96, 96, Mode::Eval).unwrap(); }
    println!("fwd eval : {:.3} s", t0.elapsed().as_secs_f64() / 3.0);

    // Train-mode forward only.
    let t0 = Instant::now();
    for i in 0..3 { model.forward(&pixels, 5, 96, 96, Mode::Train { seed: i }).unwrap(); }
    println!("fwd train: {:.3} s", t0.elapsed().as_secs_f64() / 3.0);

    // Full step: forward + loss + backward.
    let t0 = Instant::now();
    for i in 0..3 {
        let (fw, pred) = model.forward(&pixels, 5, 96, 96, Mode::Train { seed: i }).unwrap();
        let scores = similarity_matrix(&gts, &pred, &LossWeights::default(), MatchMode::Mask).unwrap();
        let a = hungarian_max(&scores, gts.len(), 20).unwrap();
        let loss = clip_loss(&gts, &pred, &a, &LossWeights::default()).unwrap();
        let t1 = Instant::now();
        fw.graph().backward(&loss).unwrap();
        if i == 0 { println!("  backward alone: {:.3} s", t1.elapsed().as_secs_f64()); }
        let _ = fw.grads();
    }
    println!("full step: {:.3} s/clip", t0.elapsed().as_secs_f64() / 3.0);
}
