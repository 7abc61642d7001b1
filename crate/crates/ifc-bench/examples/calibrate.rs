use ifc_core::eval::EvalConfig;
use ifc_core::model::{Model, ModelConfig};
use ifc_core::synth::{generate, sample_scene, DatasetSpec};
use ifc_core::train::{evaluate_model, sample_batch, train_step, AdamW, EvalProtocol, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr_stem: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-5);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let dropout: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let lr_tf: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-4);

    let dspec = DatasetSpec { train_videos: 60, eval_videos: 12, ..Default::default() };
    println!("generating data...");
    let t0 = Instant::now();
    let train: Vec<_> = (0..dspec.train_videos).map(|i| generate(&sample_scene(&dspec, 100 + i as u64)).unwrap()).collect();
    let evalv: Vec<_> = (0..dspec.eval_videos).map(|i| generate(&sample_scene(&dspec, 9000 + i as u64)).unwrap()).collect();
    println!("data: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        model: ModelConfig { dropout, ..Default::default() },
        batch_size: batch,
        lr_stem,
        lr_transformer: lr_tf,
        total_steps: steps,
        seed: 1,
        ..Default::default()
    };
    let mut model = Model::init(cfg.model, cfg.seed).unwrap();
    let mut opt = AdamW::new();
    let t0 = Instant::now();
    for step in 0..steps {
        let b = sample_batch(&cfg, &train, step).unwrap();
        let stats = train_step(&mut model, &mut opt, &cfg, &b, step).unwrap();
        if step % 20 == 0 || step + 1 == steps {
            println!("step {} loss {:.4} gnorm {:.3} ({:.2} s/step)", step, stats.loss, stats.grad_norm, t0.elapsed().as_secs_f64() / (step + 1) as f64);
        }
        if (step + 1) % 150 == 0 {
            let te = Instant::now();
            let r = evaluate_model(&model, &evalv, &EvalProtocol::default(), &EvalConfig::default()).unwrap();
            println!("  eval@{}: AP {:.3} AP50 {:.3} AR10 {:.3} ({:.1}s)", step + 1, r.ap, r.ap50, r.ar10, te.elapsed().as_secs_f64());
        }
    }
}
