use ifc_core::eval::EvalConfig;
use ifc_core::model::{Model, ModelConfig};
use ifc_core::synth::{generate, sample_scene, DatasetSpec};
use ifc_core::train::{evaluate_model, sample_batch, train_step, AdamW, EvalProtocol, TrainConfig};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let spec = DatasetSpec::default();
    let t0 = Instant::now();
    let train: Vec<_> = (0..spec.train_videos).map(|i| generate(&sample_scene(&spec, 10_000 + i as u64)).unwrap()).collect();
    let evalv: Vec<_> = (0..spec.eval_videos).map(|i| generate(&sample_scene(&spec, 90_000 + i as u64)).unwrap()).collect();
    println!("data {:.0}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig {
        model: ModelConfig::default(),
        clip_len: 5,
        batch_size: 4,
        lr_stem: 1e-4,
        total_steps: steps,
        seed: 8,
        ..Default::default()
    };
    cfg.model.dropout = 0.0;
    let mut model = Model::init(cfg.model, cfg.seed).unwrap();
    let mut opt = AdamW::new();
    let t0 = Instant::now();
    for step in 0..steps {
        let b = sample_batch(&cfg, &train, step).unwrap();
        let stats = train_step(&mut model, &mut opt, &cfg, &b, step).unwrap();
        if step % 100 == 0 {
            println!("step {} loss {:.4} ({:.2} s/step)", step, stats.loss, t0.elapsed().as_secs_f64() / (step + 1) as f64);
        }
        if step + 1 == 1000 || step + 1 == 1500 {
            let q: Vec<_> = evalv[..10].to_vec();
            let r = evaluate_model(&model, &q, &EvalProtocol::default(), &EvalConfig::default()).unwrap();
            println!("  partial eval@{} (10 videos): AP {:.3} AP50 {:.3}", step + 1, r.ap, r.ap50);
        }
    }
    println!("train {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let t0 = Instant::now();
    let r = evaluate_model(&model, &evalv, &EvalProtocol::default(), &EvalConfig::default()).unwrap();
    println!("final eval ({:.1} min): AP {:.3} AP50 {:.3} AP75 {:.3} AR10 {:.3}", t0.elapsed().as_secs_f64() / 60.0, r.ap, r.ap50, r.ap75, r.ar10);
}
