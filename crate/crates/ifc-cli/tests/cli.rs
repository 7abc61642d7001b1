//! End-to-end checks of the `ifc-lab` binary: exit codes, determinism,
//! manifest contents and file formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ifc-lab")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ifc_cli_{}_{}", name, std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_small_spec(dir: &Path) -> PathBuf {
    let spec = serde_json::json!({
        "train_videos": 2,
        "eval_videos": 1,
        "frames": 6,
        "canvas": [32, 32],
        "min_instances": 1,
        "max_instances": 2,
        "occlusion": false,
        "blur": false
    });
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_vec(&spec).unwrap()).unwrap();
    path
}

fn json_at(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_dataset_and_is_seed_deterministic() {
    let dir = tmp("gen");
    let spec = write_small_spec(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "gen-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert!(out_a.join("dataset.json").is_file());
    assert!(out_a.join("manifest.json").is_file());
    assert_eq!(fs::read_dir(out_a.join("train")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(out_a.join("eval")).unwrap().count(), 1);

    // Same seed, byte-identical annotations.
    let ann_a = fs::read(out_a.join("train/000/annotations.json")).unwrap();
    let ann_b = fs::read(out_b.join("train/000/annotations.json")).unwrap();
    assert_eq!(ann_a, ann_b);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_data_rejects_zero_videos_with_exit_2() {
    let dir = tmp("gen0");
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        serde_json::to_vec(&serde_json::json!({
            "train_videos": 0,
            "eval_videos": 0,
            "frames": 6,
            "canvas": [32, 32],
            "min_instances": 1,
            "max_instances": 2,
            "occlusion": false,
            "blur": false
        }))
        .unwrap(),
    )
    .unwrap();
    let r = run(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn profile_default_grid_emits_sixteen_rows() {
    let dir = tmp("profile");
    let out = dir.join("sweep.csv");
    let r = run(&[
        "profile",
        "--variants",
        "no_comm,full_thw,decompose_t_hw,ifc",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with(
        "variant,C,T,H,W,M,layers,flops_total,flops_proj,flops_attn,flops_ffn,flops_gather"
    ));
    assert_eq!(csv.lines().count(), 17);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn profile_validate_reports_small_errors_on_toy_grid() {
    let dir = tmp("profval");
    let grid = dir.join("grid.json");
    fs::write(
        &grid,
        serde_json::to_vec(&serde_json::json!({
            "channels": [8],
            "clip_lengths": [2, 3],
            "resolutions": [[64, 64]],
            "ffn_dim": 16,
            "heads": 2,
            "num_layers": 2,
            "memory_tokens": 2
        }))
        .unwrap(),
    )
    .unwrap();
    let out = dir.join("sweep.csv");
    let r = run(&[
        "profile",
        "--variants",
        "no_comm,full_thw,decompose_t_hw,ifc",
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--validate",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    let mut validated = 0;
    for line in stdout.lines().filter(|l| l.contains("rel_err=")) {
        let err: f64 = line.split("rel_err=").nth(1).unwrap().trim().parse().unwrap();
        assert!(err < 0.01, "{line}");
        validated += 1;
    }
    assert_eq!(validated, 8);

    let r = run(&["profile", "--variants", "", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

fn smoke_train_config(dir: &Path, steps: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "channels": 8,
            "heads": 2,
            "ffn_dim": 16,
            "enc_layers": 1,
            "dec_layers": 1,
            "num_queries": 4,
            "num_classes": 3,
            "decoder_channels": 2,
            "variant": {"kind": "ifc", "memory_tokens": 2, "grouping": "decomposed"},
            "dropout": 0.0,
            "include_memory_keys": true
        },
        "clip_len": 3,
        "batch_size": 1,
        "total_steps": steps,
        "checkpoint_every": steps,
        "seed": 5,
        "eval": {"clip_len": 3, "stride": 3, "tau": 0.5, "min_confidence": 0.05}
    });
    let path = dir.join("train.json");
    fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tmp("pipeline");
    let spec = write_small_spec(&dir);
    let data = dir.join("data");
    let r = run(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(r.status.success());

    // Short smoke training writes logs, checkpoints and an eval report.
    let cfg = smoke_train_config(&dir, 4);
    let train_out = dir.join("run");
    let r = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let log = fs::read_to_string(train_out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["loss"].as_f64().unwrap().is_finite());
    assert!(first["wall_ms"].is_u64());
    let ckpt = train_out.join("checkpoints/final.ckpt");
    assert!(ckpt.is_file());
    assert!(train_out.join("eval.json").is_file());

    // Inference: near-online with overlap 1, manifest records the mode.
    let video_dir = data.join("eval/000");
    let infer_out = dir.join("tracks");
    let r = run(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--video",
        video_dir.to_str().unwrap(),
        "--T",
        "3",
        "--S",
        "2",
        "--tau",
        "0.5",
        "--out",
        infer_out.to_str().unwrap(),
        "--dump-attn",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = json_at(&infer_out.join("manifest.json"));
    assert_eq!(manifest["details"]["mode"], "near-online");
    assert_eq!(manifest["details"]["overlap"], 1);
    assert!(infer_out.join("000/attention.json").is_file());

    // Track masks parse back through the annotation RLE rules.
    let tracks = json_at(&infer_out.join("000/tracks.json"));
    assert_eq!(tracks["height"], 16);
    assert_eq!(tracks["width"], 16);
    for t in tracks["tracks"].as_array().unwrap() {
        let total: u64 = t["rle"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, 6 * 16 * 16);
    }

    // Offline mode when T covers the whole video.
    let offline_out = dir.join("tracks_offline");
    let r = run(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--video",
        video_dir.to_str().unwrap(),
        "--T",
        "6",
        "--S",
        "6",
        "--out",
        offline_out.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let manifest = json_at(&offline_out.join("manifest.json"));
    assert_eq!(manifest["details"]["mode"], "offline");

    // Scoring the (untrained) tracks emits the metric files.
    let eval_out = dir.join("scores.json");
    let r = run(&[
        "eval",
        "--pred",
        infer_out.to_str().unwrap(),
        "--gt",
        video_dir.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let scores = json_at(&eval_out);
    assert!(scores["ap"].as_f64().unwrap() >= 0.0);
    assert!(dir.join("scores.csv").is_file());

    fs::remove_dir_all(&dir).unwrap();
}

/// Convert a video's ground truth into a tracks.json fixture at mask
/// resolution (2x2 majority downsampling, matching the pipeline).
fn gt_as_tracks(video_dir: &Path, out_dir: &Path) {
    let meta = json_at(&video_dir.join("meta.json"));
    let (h, w, n) = (
        meta["height"].as_u64().unwrap() as usize,
        meta["width"].as_u64().unwrap() as usize,
        meta["num_frames"].as_u64().unwrap() as usize,
    );
    let ann = json_at(&video_dir.join("annotations.json"));
    let (hp, wp) = (h / 2, w / 2);
    let mut tracks = Vec::new();
    for (id, inst) in ann["instances"].as_array().unwrap().iter().enumerate() {
        // Decode the annotation RLE.
        let mut volume = Vec::with_capacity(n * h * w);
        let mut value = false;
        for r in inst["rle"].as_array().unwrap() {
            for _ in 0..r.as_u64().unwrap() {
                volume.push(value);
            }
            value = !value;
        }
        if !volume.iter().any(|&b| b) {
            continue;
        }
        // 2x2 majority downsample per frame, then re-encode.
        let mut down = Vec::with_capacity(n * hp * wp);
        for f in 0..n {
            let frame = &volume[f * h * w..(f + 1) * h * w];
            for y in 0..hp {
                for x in 0..wp {
                    let mut pos = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            if frame[(y * 2 + dy) * w + x * 2 + dx] {
                                pos += 1;
                            }
                        }
                    }
                    down.push(pos >= 2);
                }
            }
        }
        let mut rle = Vec::new();
        let mut cur = false;
        let mut count = 0u64;
        for &b in &down {
            if b == cur {
                count += 1;
            } else {
                rle.push(count);
                cur = b;
                count = 1;
            }
        }
        rle.push(count);
        tracks.push(serde_json::json!({
            "id": id,
            "category": inst["category"],
            "confidence": 1.0,
            "rle": rle,
        }));
    }
    fs::create_dir_all(out_dir).unwrap();
    fs::write(
        out_dir.join("tracks.json"),
        serde_json::to_vec(&serde_json::json!({
            "height": hp,
            "width": wp,
            "num_frames": n,
            "tracks": tracks,
        }))
        .unwrap(),
    )
    .unwrap();
}

#[test]
fn eval_of_ground_truth_scores_perfect_and_empty_scores_zero() {
    let dir = tmp("evalgt");
    let spec = write_small_spec(&dir);
    let data = dir.join("data");
    let r = run(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(r.status.success());

    let gt_dir = data.join("eval");
    let pred_dir = dir.join("pred");
    gt_as_tracks(&gt_dir.join("000"), &pred_dir.join("000"));

    let out = dir.join("gt_eval.json");
    let r = run(&[
        "eval",
        "--pred",
        pred_dir.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let scores = json_at(&out);
    assert_eq!(scores["ap"].as_f64().unwrap(), 1.0);
    assert_eq!(scores["ap50"].as_f64().unwrap(), 1.0);

    // Empty prediction directory scores zero.
    let empty = dir.join("none");
    fs::create_dir_all(&empty).unwrap();
    let out0 = dir.join("zero.json");
    let r = run(&[
        "eval",
        "--pred",
        empty.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--out",
        out0.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    assert_eq!(json_at(&out0)["ap"].as_f64().unwrap(), 0.0);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_input_paths_exit_with_io_or_config_codes() {
    let dir = tmp("codes");
    let r = run(&[
        "train",
        "--config",
        dir.join("nope.json").to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));

    // Unknown config keys are a schema error.
    let bad = dir.join("bad.json");
    fs::write(&bad, br#"{"definitely_not_a_field": 1}"#).unwrap();
    let r = run(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}
