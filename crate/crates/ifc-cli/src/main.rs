//! `ifc-lab`: dataset generation, complexity profiling, training, inference
//! and evaluation for the memory-token video instance segmentation pipeline.

mod commands;
mod formats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ifc-lab", version, about = "video instance segmentation lab")]
struct Cli {
    /// Worker threads; falls back to IFC_LAB_THREADS, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Dataset spec JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic FLOP sweep over encoder variants, CSV output.
    Profile {
        /// Comma-separated: no_comm,full_thw,decompose_t_hw,ifc
        #[arg(long)]
        variants: String,
        /// Sweep grid JSON; the built-in comparison grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cross-check each feasible row against the instrumented ledger.
        #[arg(long)]
        validate: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run tracking inference over a video directory (or directory of them).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "S")]
        s: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        /// Export memory-token attention maps alongside the tracks.
        #[arg(long)]
        dump_attn: bool,
    },
    /// Score predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("IFC_LAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = resolve_threads(cli.threads);
    let result = match cli.command {
        Command::GenData { spec, out, seed } => commands::gen_data(spec.as_deref(), &out, seed, threads),
        Command::Profile {
            variants,
            grid,
            out,
            validate,
        } => commands::profile(&variants, grid.as_deref(), &out, validate),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&config, &data, &out, resume.as_deref(), threads),
        Command::Infer {
            ckpt,
            video,
            t,
            s,
            tau,
            out,
            dump_attn,
        } => commands::infer(&ckpt, &video, t, s, tau, &out, dump_attn),
        Command::Eval { pred, gt, out } => commands::eval(&pred, &gt, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(4)
            } else if matches!(e, ifc_core::Error::Io { .. }) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
