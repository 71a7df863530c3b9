use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rapa::dataset::Dataset;
use rapa::eval::evaluate_model;
use rapa::train::{init_model, load_checkpoint, train};
use rapa::{ablate, gradcheck, synth, Config};

#[derive(Parser)]
#[command(name = "rapa", version, about = "Part-aligned video re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth(Common),
    /// Train on --data, writing log and checkpoints to --out.
    Train(Common),
    /// Evaluate a checkpoint on the query/gallery splits of --data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to <out>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate freshly initialised weights instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
    },
    /// Compare analytic and finite-difference gradients in double precision.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupts analytic gradients; the check must then fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Train and evaluate every ablation variant on --data.
    Ablate(Common),
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("--{flag} is required for this command"),
    }
}

fn load_data(common: &Common) -> Result<Dataset> {
    let root = required(&common.data, "data")?;
    Dataset::load(root).with_context(|| format!("loading dataset from {}", root.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            let out = required(&common.out, "out")?;
            let ds = synth::generate(&cfg.data, cfg.seed)?;
            ds.save(out)?;
            println!("wrote {} clips of {} identities to {}", ds.clips.len(), ds.num_identities(), out.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let ds = load_data(&common)?;
            let out = required(&common.out, "out")?;
            let start = Instant::now();
            let mut last_epoch = usize::MAX;
            let trained = train(&cfg, &ds, Some(out), |row| {
                if row.epoch != last_epoch {
                    last_epoch = row.epoch;
                    eprintln!("epoch {:>3}  step {:>5}  loss {:.4}", row.epoch, row.step, row.total);
                }
            })?;
            println!(
                "trained {} steps in {:.1}s; final loss {:.4}",
                trained.log.len(),
                start.elapsed().as_secs_f64(),
                trained.log.last().map_or(f32::NAN, |r| r.total)
            );
        }
        Command::Eval {
            common,
            checkpoint,
            untrained,
        } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&common)?;
            let out = required(&common.out, "out")?;
            let (model, mut store) = init_model(&cfg, ds.num_identities());
            if !untrained {
                let dir = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
                load_checkpoint(&mut store, &dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            }
            let ev = evaluate_model(&model, &store, &ds, &cfg.eval)?;
            ev.write(out)?;
            print!("{}", ev.metrics.to_csv());
        }
        Command::Gradcheck { common, inject_bug } => {
            let mut cfg = load_config(&common)?;
            cfg.gradcheck.inject_bug |= inject_bug;
            let start = Instant::now();
            let report = gradcheck::run(&cfg)?;
            print!("{}", report.table());
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("gradcheck.txt"), report.table())?;
            }
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let ds = load_data(&common)?;
            let out = required(&common.out, "out")?;
            let result = ablate::run(&cfg, &ds, Some(out), |msg| eprintln!("{msg}"))?;
            print!("{}", result.table1_csv());
            print!("{}", result.table2_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
