use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;

mod commands;
mod tables;

/// Glioma segmentation pipeline: synthetic data, preprocessing, style-transfer
/// augmentation, U-Net training and evaluation statistics.
#[derive(Debug, Parser)]
#[command(name = "glioseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic phantom cases (optionally degraded) as NIfTI + dataset.json.
    PhantomGen(commands::PhantomGenArgs),
    /// Crop to foreground, z-score nonzero voxels and resample.
    Preprocess(commands::PreprocessArgs),
    /// Stylise content cases with randomly paired style cases.
    Augment(commands::AugmentArgs),
    /// Train a U-Net on one cross-validation fold (or an explicit validation set).
    Train(commands::TrainArgs),
    /// Fine-tune a checkpoint on new cases with reset optimizer state.
    Finetune(commands::FinetuneArgs),
    /// Five-fold cross-validation with per-epoch tables.
    Crossval(commands::CrossvalArgs),
    /// Sliding-window prediction for every case of a dataset.
    Predict(commands::PredictArgs),
    /// Region and lesion-wise Dice of predictions against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Paired t-test between one column of two CSV files.
    Stats(commands::StatsArgs),
    /// Aggregate per-fold lesion-wise CSVs into one table.
    Report(commands::ReportArgs),
}

const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<glioseg::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // clap picks 0 for --help/--version and 2 for usage errors
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::PhantomGen(a) => commands::phantom_gen(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Train(a) => commands::train(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Crossval(a) => commands::crossval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Parses `a,b,c` into three values.
fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid value {p:?} in {s:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn descriptor_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(glioseg::descriptor::DESCRIPTOR_FILE)
    } else {
        p.to_path_buf()
    }
}

fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Order-preserving map over `items` on up to `jobs` threads.
fn par_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn check_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(())
}
