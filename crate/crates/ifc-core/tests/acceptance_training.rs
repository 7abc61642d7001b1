//! Slow acceptance criteria: end-to-end toy training, directional
//! ablations over encoder variants and matching modes, and training
//! determinism with checkpoint persistence.
//!
//! These run a real training loop; expect the suite to take a while on a
//! laptop-class machine (the wall budget scales with cores because clips
//! within a batch run in parallel).

use std::time::Instant;

use ifc_core::encoder::EncoderVariant;
use ifc_core::eval::EvalConfig;
use ifc_core::matching::MatchMode;
use ifc_core::model::{clip_pixels, Mode, Model, ModelConfig};
use ifc_core::synth::{generate, sample_scene, AnnotatedVideo, DatasetSpec};
use ifc_core::train::{
    evaluate_model, load_checkpoint, sample_batch, save_checkpoint, train_step, AdamW,
    EvalProtocol, TrainConfig,
};

fn make_videos(spec: &DatasetSpec, base_seed: u64, count: usize) -> Vec<AnnotatedVideo> {
    (0..count)
        .map(|i| generate(&sample_scene(spec, base_seed + i as u64)).expect("scene generates"))
        .collect()
}

fn run_training(cfg: &TrainConfig, data: &[AnnotatedVideo]) -> (Model, f64) {
    let mut model = Model::init(cfg.model, cfg.seed).expect("model init");
    let mut opt = AdamW::new();
    let mut last = f64::NAN;
    for step in 0..cfg.total_steps {
        let batch = sample_batch(cfg, data, step).expect("batch");
        last = train_step(&mut model, &mut opt, cfg, &batch, step).expect("step").loss;
    }
    (model, last)
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_end_to_end_toy_training() {
    let started = Instant::now();
    let spec = DatasetSpec::default(); // 200 train / 50 eval, 36f, 96x96
    let train = make_videos(&spec, 10_000, spec.train_videos);
    let eval = make_videos(&spec, 90_000, spec.eval_videos);

    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(4);
    let cfg = TrainConfig {
        model: ModelConfig::default(), // C=64, M=8, N_E=N_D=3, T via clip_len
        clip_len: 5,
        batch_size: 4,
        lr_transformer: 1e-4,
        // The modeled setting fine-tunes a pretrained backbone at 1e-5;
        // training the stem from scratch needs the full rate.
        lr_stem: 1e-4,
        total_steps: 2000,
        seed: 8,
        threads,
        ..Default::default()
    };
    assert!(cfg.total_steps <= 20_000, "step budget exceeded");
    let mut cfg = cfg;
    cfg.model.dropout = 0.0;
    cfg.validate().unwrap();

    let (model, last_loss) = run_training(&cfg, &train);
    let train_time = started.elapsed();

    let eval_cfg = EvalConfig::default();
    let result = evaluate_model(&model, &eval, &EvalProtocol::default(), &eval_cfg).unwrap();
    println!(
        "criterion 8: {} steps (batch {}), final loss {:.3}, held-out AP {:.3} AP50 {:.3} AP75 {:.3} AR10 {:.3}",
        cfg.total_steps, cfg.batch_size, last_loss, result.ap, result.ap50, result.ap75, result.ar10
    );
    println!(
        "criterion 8: wall {:.1} min on {} worker thread(s); the per-clip parallel batch divides this across cores",
        started.elapsed().as_secs_f64() / 60.0,
        threads
    );
    assert!(
        result.ap50 >= 0.50,
        "held-out AP50 {} below the 0.50 gate",
        result.ap50
    );
    println!(
        "criterion 8 PASS: AP50 {:.3} >= 0.50 in {:.1} min train + {:.1} min eval",
        result.ap50,
        train_time.as_secs_f64() / 60.0,
        (started.elapsed() - train_time).as_secs_f64() / 60.0
    );
}

// ---------------------------------------------------------------- criterion 9

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

fn ablation_config(variant: EncoderVariant, mode: MatchMode, seed: u64) -> TrainConfig {
    TrainConfig {
        model: small_model(variant),
        clip_len: 5,
        batch_size: 2,
        lr_transformer: 2e-4,
        lr_stem: 2e-4,
        total_steps: 3000,
        seed,
        match_mode: mode,
        ..Default::default()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn criterion_9_directional_ablations() {
    let started = Instant::now();
    let spec = DatasetSpec {
        train_videos: 60,
        eval_videos: 16,
        frames: 24,
        canvas: (48, 48),
        min_instances: 2,
        max_instances: 3,
        occlusion: true,
        blur: false,
    };
    let train = make_videos(&spec, 30_000, spec.train_videos);
    let eval = make_videos(&spec, 70_000, spec.eval_videos);
    let eval_cfg = EvalConfig::default();

    let seeds: Vec<u64> = (0..5).collect();
    let mut ap_ifc = Vec::new();
    let mut ap_nocomm = Vec::new();
    let mut ap_box = Vec::new();
    let mut ap_s1 = Vec::new();
    let mut ap_s3 = Vec::new();

    for &seed in &seeds {
        let (ifc_model, _) = run_training(&ablation_config(EncoderVariant::ifc(8), MatchMode::Mask, seed), &train);
        let (nc_model, _) = run_training(&ablation_config(EncoderVariant::NoComm, MatchMode::Mask, seed), &train);
        let (box_model, _) = run_training(&ablation_config(EncoderVariant::ifc(8), MatchMode::Box, seed), &train);

        let s1 = EvalProtocol { clip_len: 5, stride: 1, ..Default::default() };
        let s3 = EvalProtocol { clip_len: 5, stride: 3, ..Default::default() };
        let r_ifc = evaluate_model(&ifc_model, &eval, &s1, &eval_cfg).unwrap();
        let r_nc = evaluate_model(&nc_model, &eval, &s1, &eval_cfg).unwrap();
        let r_box = evaluate_model(&box_model, &eval, &s1, &eval_cfg).unwrap();
        let r_s3 = evaluate_model(&ifc_model, &eval, &s3, &eval_cfg).unwrap();
        println!(
            "criterion 9 seed {}: ifc {:.3} no_comm {:.3} box {:.3} ifc@S3 {:.3}",
            seed, r_ifc.ap, r_nc.ap, r_box.ap, r_s3.ap
        );
        ap_ifc.push(r_ifc.ap);
        ap_nocomm.push(r_nc.ap);
        ap_box.push(r_box.ap);
        ap_s1.push(r_ifc.ap);
        ap_s3.push(r_s3.ap);
    }

    let (m_ifc, s_ifc) = mean_std(&ap_ifc);
    let (m_nc, s_nc) = mean_std(&ap_nocomm);
    let (m_box, s_box) = mean_std(&ap_box);
    let (m_s1, _) = mean_std(&ap_s1);
    let (m_s3, _) = mean_std(&ap_s3);
    println!(
        "criterion 9 means over {} seeds: ifc {:.3}+-{:.3} no_comm {:.3}+-{:.3} box {:.3}+-{:.3} | stride1 {:.3} stride3 {:.3}",
        seeds.len(), m_ifc, s_ifc, m_nc, s_nc, m_box, s_box, m_s1, m_s3
    );

    // (a) communication helps on the occlusion-heavy split.
    assert!(
        m_ifc >= m_nc,
        "mean AP(ifc) {:.3} < AP(no_comm) {:.3}",
        m_ifc,
        m_nc
    );
    // (b) mask-based matching beats box-based matching.
    assert!(
        m_ifc >= m_box,
        "mean AP(mask) {:.3} < AP(box) {:.3}",
        m_ifc,
        m_box
    );
    // (c) stride 3 loses less than 2 AP points against stride 1.
    assert!(
        m_s1 - m_s3 < 0.02,
        "stride-3 AP drop {:.3} exceeds 0.02",
        m_s1 - m_s3
    );
    println!(
        "criterion 9 PASS: ifc >= no_comm, mask >= box, stride drop {:.4} < 0.02 ({:.1} min)",
        m_s1 - m_s3,
        started.elapsed().as_secs_f64() / 60.0
    );
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_training_determinism_and_checkpoints() {
    let spec = DatasetSpec {
        train_videos: 4,
        eval_videos: 0,
        frames: 8,
        canvas: (32, 32),
        min_instances: 1,
        max_instances: 2,
        occlusion: false,
        blur: false,
    };
    let data = make_videos(&spec, 50_000, 4);
    let cfg = TrainConfig {
        model: ModelConfig {
            channels: 16,
            heads: 2,
            ffn_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 6,
            num_classes: 3,
            decoder_channels: 4,
            variant: EncoderVariant::ifc(4),
            dropout: 0.1,
            include_memory_keys: true,
        },
        clip_len: 3,
        batch_size: 2,
        total_steps: 6,
        seed: 99,
        ..Default::default()
    };

    // Fixed seed reproduces the loss curve bit-identically.
    let curve = |cfg: &TrainConfig| -> Vec<u64> {
        let mut model = Model::init(cfg.model, cfg.seed).unwrap();
        let mut opt = AdamW::new();
        (0..cfg.total_steps)
            .map(|s| {
                let b = sample_batch(cfg, &data, s).unwrap();
                train_step(&mut model, &mut opt, cfg, &b, s).unwrap().loss.to_bits()
            })
            .collect()
    };
    let a = curve(&cfg);
    let b = curve(&cfg);
    assert_eq!(a, b, "fixed-seed loss curves must be bit-identical");

    // Checkpoint save/load round-trips forward outputs bit-identically and
    // resumes the optimizer exactly.
    let mut model = Model::init(cfg.model, cfg.seed).unwrap();
    let mut opt = AdamW::new();
    for s in 0..3 {
        let batch = sample_batch(&cfg, &data, s).unwrap();
        train_step(&mut model, &mut opt, &cfg, &batch, s).unwrap();
    }
    let dir = std::env::temp_dir().join(format!("ifc_accept_ckpt_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mid.ckpt");
    save_checkpoint(&path, &model, &opt, &cfg, 3).unwrap();

    let pixels = clip_pixels(&data[0].frames, &[0, 1, 2], 32, 32, false);
    let (_f1, before) = model.forward(&pixels, 3, 32, 32, Mode::Eval).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    let restored_model = Model::from_parts(cfg.model, restored.params);
    let (_f2, after) = restored_model.forward(&pixels, 3, 32, 32, Mode::Eval).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(before.mask_logits.to_vec()), bits(after.mask_logits.to_vec()));
    assert_eq!(bits(before.class_probs.to_vec()), bits(after.class_probs.to_vec()));

    let batch = sample_batch(&cfg, &data, 3).unwrap();
    let live = train_step(&mut model, &mut opt, &cfg, &batch, 3).unwrap().loss;
    let mut resumed_model = restored_model;
    let mut resumed_opt = load_checkpoint(&path).unwrap().optimizer;
    let resumed = train_step(&mut resumed_model, &mut resumed_opt, &cfg, &batch, 3)
        .unwrap()
        .loss;
    assert_eq!(live.to_bits(), resumed.to_bits(), "resume must replay the next step exactly");

    std::fs::remove_dir_all(&dir).unwrap();
    println!("criterion 10 PASS: loss curve, checkpoint round trip and resume are bit-exact");
}
