use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use ifc_core::complexity::{
    sweep, to_csv, validate_against_instrumented, SweepGrid, VALIDATE_FULL_THW_LIMIT,
};
use ifc_core::encoder::{EncoderVariant, MemoryGrouping};
use ifc_core::error::{Error, Result};
use ifc_core::eval::{evaluate, EvalConfig, VideoEval};
use ifc_core::model::Model;
use ifc_core::synth::{
    generate_dataset, list_split, read_json, read_video, write_json, DatasetSpec,
};
use ifc_core::train::{
    eval_ground_truth, evaluate_model, load_checkpoint, sample_batch, save_checkpoint, track_video_opts,
    AdamW, EvalProtocol, TrainConfig, MASK_STRIDE,
};

use crate::formats::{file_to_eval, read_tracks, tracks_to_file, write_tracks};

/// Instrumented validation budget in multiply-adds; larger rows are
/// reported as skipped.
const VALIDATE_BUDGET: u128 = 2_000_000_000;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    config: serde_json::Value,
    artifacts: Vec<String>,
    details: serde_json::Value,
    version: String,
}

fn version_string() -> String {
    format!("ifc-lab {}", env!("CARGO_PKG_VERSION"))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn gen_data(spec_path: Option<&Path>, out: &Path, seed: u64, threads: usize) -> Result<()> {
    let spec: DatasetSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    spec.validate()?;
    generate_dataset(&spec, seed, out, threads)?;
    write_manifest(
        out,
        &RunManifest {
            command: "gen-data".into(),
            config_path: spec_path.map(|p| p.display().to_string()),
            config: serde_json::to_value(&spec)?,
            artifacts: vec!["dataset.json".into(), "train/".into(), "eval/".into()],
            details: json!({ "seed": seed, "threads": threads }),
            version: version_string(),
        },
    )?;
    println!(
        "generated {} train + {} eval videos under {}",
        spec.train_videos,
        spec.eval_videos,
        out.display()
    );
    Ok(())
}

fn parse_variants(list: &str, memory_tokens: usize) -> Result<Vec<EncoderVariant>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(match name {
            "no_comm" => EncoderVariant::NoComm,
            "full_thw" => EncoderVariant::FullThw,
            "decompose_t_hw" => EncoderVariant::DecomposeTHw,
            "ifc" => EncoderVariant::Ifc {
                memory_tokens,
                grouping: MemoryGrouping::Decomposed,
            },
            "ifc_unified" => EncoderVariant::Ifc {
                memory_tokens,
                grouping: MemoryGrouping::Unified,
            },
            other => {
                return Err(Error::contract(
                    "profile",
                    format!("unknown variant `{other}`"),
                ))
            }
        });
    }
    if out.is_empty() {
        return Err(Error::contract("profile", "no variants requested"));
    }
    Ok(out)
}

pub fn profile(variants: &str, grid_path: Option<&Path>, out: &Path, validate: bool) -> Result<()> {
    let grid: SweepGrid = match grid_path {
        Some(p) => read_json(p)?,
        None => SweepGrid::reference_grid(),
    };
    let variants = parse_variants(variants, grid.memory_tokens)?;
    let reports = sweep(&variants, &grid)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(out, to_csv(&reports)).map_err(|e| Error::io(out, e))?;

    let mut validation = Vec::new();
    if validate {
        for r in &reports {
            let variant = variants
                .iter()
                .find(|v| v.name() == r.variant)
                .copied()
                .expect("variant present");
            let tokens = r.dims.t * r.dims.hw();
            let feasible = r.total <= VALIDATE_BUDGET
                && (!matches!(variant, EncoderVariant::FullThw) || tokens <= VALIDATE_FULL_THW_LIMIT);
            if feasible {
                let err = validate_against_instrumented(variant, &r.dims)?;
                println!(
                    "validate {} C={} T={} HW={}: rel_err={:.6}",
                    r.variant,
                    r.dims.c,
                    r.dims.t,
                    r.dims.hw(),
                    err
                );
                validation.push(json!({
                    "variant": r.variant,
                    "t": r.dims.t,
                    "hw": r.dims.hw(),
                    "rel_err": err,
                }));
            } else {
                println!(
                    "validate {} C={} T={} HW={}: skipped ({} multiply-adds exceed the {} budget)",
                    r.variant,
                    r.dims.c,
                    r.dims.t,
                    r.dims.hw(),
                    r.total,
                    VALIDATE_BUDGET
                );
            }
        }
    }

    let dir = out.parent().unwrap_or(Path::new("."));
    write_manifest(
        dir,
        &RunManifest {
            command: "profile".into(),
            config_path: grid_path.map(|p| p.display().to_string()),
            config: serde_json::to_value(&grid)?,
            artifacts: vec![out.display().to_string()],
            details: json!({
                "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
                "rows": reports.len(),
                "validation": validation,
            }),
            version: version_string(),
        },
    )?;
    println!("wrote {} rows to {}", reports.len(), out.display());
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<ifc_core::synth::AnnotatedVideo>> {
    list_split(data, split)?
        .iter()
        .map(|dir| read_video(dir))
        .collect()
}

pub fn train(config_path: &Path, data: &Path, out: &Path, resume: Option<&Path>, threads: usize) -> Result<()> {
    let mut cfg: TrainConfig = read_json(config_path)?;
    cfg.validate()?;
    cfg.threads = threads.max(cfg.threads);

    let train_videos = load_split(data, "train")?;
    if train_videos.is_empty() {
        return Err(Error::contract("train", "no training videos found"));
    }
    let eval_videos = load_split(data, "eval").unwrap_or_default();

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let (mut model, mut opt, start_step) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            println!("resuming from {} at step {}", path.display(), ckpt.step);
            cfg = ckpt.config.clone();
            cfg.threads = threads.max(cfg.threads);
            (
                Model::from_parts(ckpt.config.model, ckpt.params),
                ckpt.optimizer,
                ckpt.step,
            )
        }
        None => (Model::init(cfg.model, cfg.seed)?, AdamW::new(), 0),
    };

    write_manifest(
        out,
        &RunManifest {
            command: "train".into(),
            config_path: Some(config_path.display().to_string()),
            config: serde_json::to_value(&cfg)?,
            artifacts: vec![
                "checkpoints/".into(),
                "train_log.jsonl".into(),
                "eval.json".into(),
            ],
            details: json!({
                "train_videos": train_videos.len(),
                "eval_videos": eval_videos.len(),
                "resumed_from": resume.map(|p| p.display().to_string()),
            }),
            version: version_string(),
        },
    )?;

    let log_path = out.join("train_log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);

    let started = Instant::now();
    for step in start_step..cfg.total_steps {
        let step_start = Instant::now();
        let batch = sample_batch(&cfg, &train_videos, step)?;
        let stats = ifc_core::train::train_step(&mut model, &mut opt, &cfg, &batch, step)?;
        writeln!(
            log,
            "{}",
            serde_json::to_string(&json!({
                "step": step,
                "loss": stats.loss,
                "lr": stats.lr,
                "wall_ms": step_start.elapsed().as_millis() as u64,
            }))?
        )
        .map_err(|e| Error::io(&log_path, e))?;
        if (step + 1) % 50 == 0 || step + 1 == cfg.total_steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            println!(
                "step {}/{} loss {:.4} lr {:.2e} ({:.1}s elapsed)",
                step + 1,
                cfg.total_steps,
                stats.loss,
                stats.lr,
                started.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("step_{:06}.ckpt", step + 1));
            save_checkpoint(&path, &model, &opt, &cfg, step + 1)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&ckpt_dir.join("final.ckpt"), &model, &opt, &cfg, cfg.total_steps)?;

    if !eval_videos.is_empty() {
        let eval_cfg = EvalConfig {
            num_categories: cfg.model.num_classes,
            ..Default::default()
        };
        let result = evaluate_model(&model, &eval_videos, &cfg.eval, &eval_cfg)?;
        write_json(&out.join("eval.json"), &result)?;
        println!(
            "eval: AP {:.4} AP50 {:.4} AP75 {:.4} AR1 {:.4} AR10 {:.4}",
            result.ap, result.ap50, result.ap75, result.ar1, result.ar10
        );
    }
    Ok(())
}

fn video_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::contract(
            "infer",
            format!("no video directories under {}", root.display()),
        ));
    }
    Ok(out)
}

pub fn infer(ckpt: &Path, video: &Path, t: usize, s: usize, tau: f64, out: &Path, dump_attn: bool) -> Result<()> {
    if t == 0 || s == 0 || s > t {
        return Err(Error::contract("infer", "need T >= S >= 1"));
    }
    let checkpoint = load_checkpoint(ckpt)?;
    let model = Model::from_parts(checkpoint.config.model, checkpoint.params);
    let proto = EvalProtocol {
        clip_len: t,
        stride: s,
        tau,
        min_confidence: checkpoint.config.eval.min_confidence,
    };

    let dirs = video_dirs(video)?;
    let mut artifacts = Vec::new();
    let mut offline_all = true;
    for dir in &dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "video".into());
        let v = read_video(dir)?;
        let (tracks, attention) = track_video_opts(&model, &v, &proto, dump_attn)?;
        let offline = t >= v.num_frames();
        offline_all &= offline;
        let vout = out.join(&name);
        fs::create_dir_all(&vout).map_err(|e| Error::io(&vout, e))?;
        let file = tracks_to_file(&tracks, v.num_frames(), v.h / MASK_STRIDE, v.w / MASK_STRIDE);
        write_tracks(&vout.join("tracks.json"), &file)?;
        artifacts.push(format!("{}/tracks.json", name));
        if dump_attn {
            let maps: Vec<serde_json::Value> = attention
                .iter()
                .map(|a| {
                    json!({
                        "range": [a.range.0, a.range.1],
                        "maps": a.maps,
                    })
                })
                .collect();
            write_json(&vout.join("attention.json"), &maps)?;
            artifacts.push(format!("{}/attention.json", name));
        }
        println!("{}: {} tracks", name, file.tracks.len());
    }

    write_manifest(
        out,
        &RunManifest {
            command: "infer".into(),
            config_path: Some(ckpt.display().to_string()),
            config: serde_json::to_value(&checkpoint.config)?,
            artifacts,
            details: json!({
                "clip_len": t,
                "stride": s,
                "overlap": t - s,
                "tau": tau,
                "mode": if offline_all { "offline" } else { "near-online" },
                "videos": dirs.len(),
                "dump_attention": dump_attn,
            }),
            version: version_string(),
        },
    )?;
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let gt_dirs = video_dirs(gt)?;
    let mut videos = Vec::new();
    let mut num_categories = 3;
    for dir in &gt_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "video".into());
        let v = read_video(dir)?;
        let meta: ifc_core::synth::VideoMeta = read_json(&dir.join("meta.json"))?;
        num_categories = meta.categories.len();
        let ground_truth = eval_ground_truth(&v);
        let track_path = pred.join(&name).join("tracks.json");
        let predictions = if track_path.is_file() {
            let file = read_tracks(&track_path)?;
            if file.height != v.h / MASK_STRIDE || file.width != v.w / MASK_STRIDE || file.num_frames != v.num_frames()
            {
                return Err(Error::format(
                    "tracks",
                    format!("{} does not match the video extents", track_path.display()),
                ));
            }
            file_to_eval(&file)?
        } else {
            Vec::new()
        };
        videos.push(VideoEval {
            predictions,
            ground_truth,
        });
    }

    let cfg = EvalConfig {
        num_categories,
        ..Default::default()
    };
    let result = evaluate(&videos, &cfg)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_json(out, &result)?;
    let csv_path = out.with_extension("csv");
    let mut csv = String::from("category,ap\n");
    for (c, ap) in &result.per_category_ap {
        csv.push_str(&format!("{},{}\n", c, ap));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let dir = out.parent().unwrap_or(Path::new("."));
    write_manifest(
        dir,
        &RunManifest {
            command: "eval".into(),
            config_path: None,
            config: serde_json::to_value(&cfg)?,
            artifacts: vec![out.display().to_string(), csv_path.display().to_string()],
            details: json!({ "videos": videos.len() }),
            version: version_string(),
        },
    )?;
    println!(
        "AP {:.4} AP50 {:.4} AP75 {:.4} AR1 {:.4} AR10 {:.4}",
        result.ap, result.ap50, result.ap75, result.ar1, result.ar10
    );
    Ok(())
}
