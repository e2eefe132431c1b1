// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use causal_gap::TaskKind;
use lab::config::OUT_ENV;
use lab::error::Result;
use lab::pipeline::{run_seed, train_stage};
use lab::summary::{aggregate_dir, load_reports};
use lab::{export, fsio, pool, ExperimentConfig, Overrides};
use serde::Serialize;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Name of the resolved configuration written into the output directory.
const EXPERIMENT_FILE: &str = "experiment.json";

#[derive(Parser)]
#[command(name = "lab", version, about = "Train small transformers and compare gradient and ablation importance")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline for every (task, seed) pair.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        tasks: Option<Vec<TaskKind>>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run one (task, seed) pair from a resolved experiment file.
    #[command(hide = true)]
    RunOne {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        seed: u64,
    },
    /// Recompute summary.json from the seed reports under DIR.
    Aggregate {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write the CSV tables for the seed reports under DIR.
    Export {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train one model and write checkpoint.bin and train_result.json.
    Train {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct SweepManifest {
    started_unix: u64,
    finished_unix: u64,
    jobs: Vec<(TaskKind, u64, bool)>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn aggregate_and_export(dir: &Path) -> Result<()> {
    let summary = aggregate_dir(dir)?;
    let reports = load_reports(dir)?;
    for w in export::export_csv(dir, &reports, &summary)? {
        eprintln!("warning: {} {} {}: {}", w.task, w.seed, w.file, w.message);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Cmd::Run {
            config,
            tasks,
            seeds,
            parallel,
            resume,
            output_dir,
        } => {
            let cfg = load_config(config.as_deref())?.resolve(
                std::env::var_os(OUT_ENV).map(PathBuf::from),
                Overrides {
                    tasks,
                    seeds,
                    parallel,
                    resume,
                    output_dir,
                },
            )?;
            let experiment = cfg.output_dir.join(EXPERIMENT_FILE);
            fsio::write_json(&experiment, &cfg)?;
            let jobs: Vec<(TaskKind, u64)> = cfg
                .tasks
                .iter()
                .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
                .collect();
            let started_unix = unix_now();
            let exe = std::env::current_exe().map_err(|e| lab::LabError::io("lab", e))?;
            let outcomes = pool::run_pool(&exe, &experiment, &jobs, cfg.parallel)?;
            fsio::write_json(
                &cfg.output_dir.join("run_manifest.json"),
                &SweepManifest {
                    started_unix,
                    finished_unix: unix_now(),
                    jobs: outcomes.iter().map(|o| (o.task, o.seed, o.success)).collect(),
                },
            )?;
            let all_ok = outcomes.iter().all(|o| o.success);
            if outcomes.iter().any(|o| o.success) {
                aggregate_and_export(&cfg.output_dir)?;
            }
            Ok(all_ok)
        }
        Cmd::RunOne { experiment, task, seed } => {
            let cfg = ExperimentConfig::load(&experiment)?;
            run_seed(&cfg, task, seed)?;
            Ok(true)
        }
        Cmd::Aggregate { dir } => {
            aggregate_dir(&dir)?;
            Ok(true)
        }
        Cmd::Export { dir } => {
            let summary = lab::aggregate(&load_reports(&dir)?);
            let reports = load_reports(&dir)?;
            export::export_csv(&dir, &reports, &summary)?;
            Ok(true)
        }
        Cmd::Train { task, seed, out, config } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            let mut log = |m: &str| eprintln!("[{task} {seed}] {m}");
            let (_, rec, _) = train_stage(
                &cfg,
                task,
                seed,
                &out.join("checkpoint.bin"),
                &out.join("train_result.json"),
                false,
                &mut log,
            )?;
            eprintln!(
                "[{task} {seed}] {} steps, train acc {:.3}, id acc {:.3}",
                rec.result.steps_taken, rec.result.final_train_acc, rec.id_accuracy
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
