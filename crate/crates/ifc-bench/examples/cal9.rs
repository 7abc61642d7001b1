use ifc_core::encoder::EncoderVariant;
use ifc_core::eval::EvalConfig;
use ifc_core::matching::MatchMode;
use ifc_core::model::{Model, ModelConfig};
use ifc_core::synth::{generate, sample_scene, DatasetSpec};
use ifc_core::train::{evaluate_model, sample_batch, train_step, AdamW, EvalProtocol, TrainConfig};
use std::time::Instant;

fn small_model(variant: EncoderVariant) -> ModelConfig {
    ModelConfig {
        channels: 32,
        heads: 4,
        ffn_dim: 128,
        enc_layers: 3,
        dec_layers: 3,
        num_queries: 12,
        num_classes: 3,
        decoder_channels: 8,
        variant,
        dropout: 0.0,
        include_memory_keys: true,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let seeds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let dspec = DatasetSpec {
        train_videos: 60,
        eval_videos: 16,
        frames: 24,
        canvas: (48, 48),
        min_instances: 2,
        max_instances: 3,
        occlusion: true,
        blur: false,
    };
    let train: Vec<_> = (0..dspec.train_videos).map(|i| generate(&sample_scene(&dspec, 300 + i as u64)).unwrap()).collect();
    let evalv: Vec<_> = (0..dspec.eval_videos).map(|i| generate(&sample_scene(&dspec, 77000 + i as u64)).unwrap()).collect();

    for seed in 0..seeds {
        for (name, variant, mode) in [
            ("ifc     ", EncoderVariant::ifc(8), MatchMode::Mask),
            ("no_comm ", EncoderVariant::NoComm, MatchMode::Mask),
            ("ifc_box ", EncoderVariant::ifc(8), MatchMode::Box),
        ] {
            let lr: f64 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
            let cfg = TrainConfig {
                model: small_model(variant),
                clip_len: 5,
                batch_size: 2,
                lr_transformer: lr,
                lr_stem: lr,
                total_steps: steps,
                seed,
                match_mode: mode,
                hflip_prob: 0.5,
                ..Default::default()
            };
            let mut model = Model::init(cfg.model, cfg.seed).unwrap();
            let mut opt = AdamW::new();
            let t0 = Instant::now();
            let mut final_loss = 0.0;
            for step in 0..steps {
                let b = sample_batch(&cfg, &train, step).unwrap();
                final_loss = train_step(&mut model, &mut opt, &cfg, &b, step).unwrap().loss;
            }
            let train_t = t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            let r = evaluate_model(&model, &evalv, &EvalProtocol::default(), &EvalConfig::default()).unwrap();
            println!(
                "seed {} {} loss {:.3} AP {:.3} AP50 {:.3} (train {:.0}s eval {:.0}s)",
                seed, name, final_loss, r.ap, r.ap50, train_t, t0.elapsed().as_secs_f64()
            );
        }
    }
}
