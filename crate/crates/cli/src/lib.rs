//! Command-line front end for `lfsamba`: dataset synthesis, scribble
//! generation, training, evaluation, inference and fusion benchmarks.

pub mod bench;
pub mod config;
pub mod error;
pub mod infer;
pub mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lfsamba::Scalar;
use lfsamba_data::checkpoint::load_model;
use lfsamba_data::scribble::scribble_dataset;
use lfsamba_data::synth::{synth_dataset, SynthConfig};

pub use config::{Precision, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "lfsamba", version, about = "Light-field salient object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic focal-stack dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        slices: usize,
    },
    /// Add synthetic scribbles to every sample of a dataset.
    Scribble {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoints into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset named in the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Predict every sample of a dataset and score the predictions.
    Eval {
        /// Optional; when given its model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one sample.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write f0.png, fslices.png and ffused.png.
        #[arg(long)]
        dump_features: bool,
    },
    /// Compare parameter counts and forward latency of the fusion variants.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the CSV; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = bench::BENCH_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = bench::BENCH_WARMUPS)]
        warmups: usize,
    },
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io("<stdout>", e))
}

fn train_cmd<S: Scalar>(config: &Path, out_dir: &Path, dataset: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    let root = cfg.dataset.clone().ok_or_else(|| CliError::Config("no dataset given".into()))?;
    let samples = train::load_dataset::<S>(&root)?;
    let mut failed = None;
    let outcome = train::train(&cfg, &samples, Some(out_dir), &mut |event| {
        if failed.is_none() {
            failed = emit(out, event).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    emit(out, format_args!("trained {} steps in {} precision", outcome.steps, S::NAME))?;
    emit(out, format_args!("checkpoint {}", out_dir.join(train::FINAL_CHECKPOINT).display()))
}

fn eval_cmd<S: Scalar>(config: Option<&Path>, ckpt: &Path, dataset: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (params, _) = load_model::<S>(ckpt)?;
    if let Some(path) = config {
        let cfg = RunConfig::load(path)?;
        if cfg.model != params.config {
            return Err(CliError::Config(format!(
                "model section of {} does not match the checkpoint",
                path.display()
            )));
        }
    }
    let report = infer::eval_checkpoint(&params, dataset, out_dir)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    emit(out, format_args!("samples {}", report.samples.len()))?;
    emit(out, format_args!("mae {}", fmt(report.mean_mae)))?;
    emit(out, format_args!("f_beta {}", fmt(report.mean_f_beta)))?;
    for id in &report.missing {
        emit(out, format_args!("missing {id}"))?;
    }
    Ok(())
}

fn bench_cmd<S: Scalar>(config: Option<&Path>, csv: Option<&Path>, runs: usize, warmups: usize, out: &mut dyn Write) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rows = bench::bench_run::<S>(&cfg.model, runs, warmups)?;
    write!(out, "{}", bench::bench_table(&rows)).map_err(|e| CliError::io("<stdout>", e))?;
    let text = bench::bench_csv(&rows);
    match csv {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => write!(out, "\n{text}").map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn dispatch<S: Scalar>(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { seed, n, out: root, size, slices } => {
            let cfg = SynthConfig { size: *size, slices: *slices, ..SynthConfig::default() };
            let entries = synth_dataset(*seed, *n, &cfg, root)?;
            emit(out, format_args!("wrote {} samples to {}", entries.len(), root.display()))
        }
        Command::Scribble { dataset, seed } => {
            scribble_dataset(dataset, *seed)?;
            emit(out, format_args!("scribbles written under {}", dataset.display()))
        }
        Command::Train { config, out: dir, dataset } => train_cmd::<S>(config, dir, dataset.as_deref(), out),
        Command::Eval { config, ckpt, dataset, out: dir } => eval_cmd::<S>(config.as_deref(), ckpt, dataset, dir, out),
        Command::Infer { ckpt, sample, out: dir, dump_features } => {
            infer::infer_checkpoint::<S>(ckpt, sample, dir, *dump_features)?;
            emit(out, format_args!("saliency {}", dir.join(infer::SALIENCY).display()))
        }
        Command::Bench { config, out: csv, runs, warmups } => {
            bench_cmd::<S>(config.as_deref(), csv.as_deref(), *runs, *warmups, out)
        }
    }
}

/// Runs one parsed command at the given precision.
pub fn run(cli: &Cli, precision: Precision, out: &mut dyn Write) -> Result<()> {
    match precision {
        Precision::F64 => dispatch::<f64>(&cli.command, out),
        Precision::F32 => dispatch::<f32>(&cli.command, out),
    }
}
