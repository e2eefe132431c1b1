// SPDX-License-Identifier: MIT OR Apache-2.0

//! One (task, seed) run: train, pick the OOD length, score components,
//! classify, prune. Each stage writes a content-addressed file; with
//! `resume` a stage is skipped when its file exists and refers to the
//! checkpoint on disk.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use causal_gap::checkpoint::{self, sha256_hex};
use causal_gap::importance::{
    causal_importance, classify, gradient_magnitude, select_ood_length, Category,
};
use causal_gap::pruning::{Metric, PruneContext, PruneRecord, PruneSelection, PruneSpec};
use causal_gap::trainer::{id_accuracy, train};
use causal_gap::{Model, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::fsio;
use crate::report::{prune_name, ImportanceFile, PruneEntry, PruningFile, SeedReport, TrainRecord};

pub const SEED_REPORT: &str = "seed_report.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// The three interventions run for every seed, in report order.
pub fn prune_specs() -> [PruneSpec; 3] {
    [
        PruneSpec {
            category: Category::Hero,
            selection: PruneSelection::TopK(2),
            metric: Metric::Ood,
        },
        PruneSpec {
            category: Category::Bloat,
            selection: PruneSelection::TopK(2),
            metric: Metric::Ood,
        },
        PruneSpec {
            category: Category::Bloat,
            selection: PruneSelection::All,
            metric: Metric::Id,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub reused: bool,
    pub seconds: f64,
}

/// Wall-clock record of a run. The only file carrying timestamps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: TaskKind,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<StageTiming>,
}

pub struct RunPaths {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub importance: PathBuf,
    pub pruning: PathBuf,
    pub report: PathBuf,
    pub manifest: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, task: TaskKind, seed: u64) -> Self {
        let dir = cfg.run_dir(task, seed);
        let th = cfg.train_hash(task, seed);
        let ah = cfg.analysis_hash(task, seed);
        Self {
            checkpoint: dir.join(format!("checkpoint.{th}.bin")),
            train: dir.join(format!("train_result.{th}.json")),
            importance: dir.join(format!("importance.{ah}.json")),
            pruning: dir.join(format!("pruning.{ah}.json")),
            report: dir.join(SEED_REPORT),
            manifest: dir.join(RUN_MANIFEST),
            dir,
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_if<T: serde::de::DeserializeOwned>(resume: bool, path: &Path) -> Option<T> {
    if resume && path.exists() {
        fsio::read_json(path).ok()
    } else {
        None
    }
}

/// Trains (or reloads) the model for one run and writes the checkpoint and
/// `train_result.json`-style record at the given paths.
pub fn train_stage(
    cfg: &ExperimentConfig,
    task: TaskKind,
    seed: u64,
    checkpoint_path: &Path,
    record_path: &Path,
    resume: bool,
    log: &mut dyn FnMut(&str),
) -> Result<(Model, TrainRecord, bool)> {
    if let Some(rec) = read_if::<TrainRecord>(resume, record_path) {
        if let Ok(bytes) = std::fs::read(checkpoint_path) {
            if sha256_hex(&bytes) == rec.checkpoint_sha {
                let (model, _) = checkpoint::from_bytes(&bytes)?;
                log("training: reused checkpoint");
                return Ok((model, rec, true));
            }
        }
    }
    let train_cfg = cfg.train_for(seed);
    let (model, result) = train(task, cfg.model, &train_cfg, |p| {
        log(&format!("step {:>5}  loss {:.4}  train_acc {:.3}", p.step, p.loss, p.train_acc))
    })
    .map_err(|e| LabError::Run {
        task: task.to_string(),
        seed,
        message: format!("training failed: {e}"),
    })?;
    let bytes = checkpoint::to_bytes(&model, seed)?;
    fsio::write_bytes(checkpoint_path, &bytes)?;
    let rec = TrainRecord {
        task,
        seed,
        train_hash: cfg.train_hash(task, seed),
        checkpoint_sha: sha256_hex(&bytes),
        id_accuracy: id_accuracy(&model, task, &train_cfg)?,
        result,
    };
    fsio::write_json(record_path, &rec)?;
    Ok((model, rec, false))
}

pub fn importance_stage(
    cfg: &ExperimentConfig,
    model: &Model,
    task: TaskKind,
    seed: u64,
    checkpoint_sha: &str,
) -> Result<ImportanceFile> {
    let selection = select_ood_length(model, task, &cfg.eval)?;
    let mut file = ImportanceFile {
        task,
        seed,
        analysis_hash: cfg.analysis_hash(task, seed),
        checkpoint_sha: checkpoint_sha.to_string(),
        selection,
        ablated_accuracy: Vec::new(),
        rho: None,
        records: Vec::new(),
    };
    let Some(length) = file.selection.chosen_length else {
        return Ok(file);
    };
    let g = gradient_magnitude(model, task, length, &cfg.eval, seed)?;
    let causal = causal_importance(model, task, &file.selection, &cfg.eval)?;
    let cl = classify(&g, &causal.importance, cfg.eval.gap_threshold)?;
    file.ablated_accuracy = causal.ablated.into_iter().collect();
    file.rho = cl.rho;
    file.records = cl.records;
    Ok(file)
}

pub fn pruning_stage(
    cfg: &ExperimentConfig,
    model: &Model,
    importance: &ImportanceFile,
) -> Result<PruningFile> {
    let (task, seed) = (importance.task, importance.seed);
    let train_cfg = cfg.train_for(seed);
    let mut entries = Vec::new();
    let mut contexts: [Option<PruneContext>; 2] = [None, None];
    for spec in prune_specs() {
        let record = if importance.selection.chosen_length.is_none() {
            PruneRecord::Skipped {
                spec,
                reason: "no valid OOD length".into(),
            }
        } else {
            let slot = match spec.metric {
                Metric::Ood => 0,
                Metric::Id => 1,
            };
            if contexts[slot].is_none() {
                contexts[slot] = Some(PruneContext::new(
                    model,
                    task,
                    spec.metric,
                    &importance.selection,
                    &cfg.eval,
                    &train_cfg,
                    cfg.ablation,
                )?);
            }
            contexts[slot]
                .as_ref()
                .expect("context built above")
                .prune_and_eval(&importance.records, spec)?
        };
        entries.push(PruneEntry {
            name: prune_name(&spec),
            record,
        });
    }
    Ok(PruningFile {
        task,
        seed,
        analysis_hash: importance.analysis_hash.clone(),
        checkpoint_sha: importance.checkpoint_sha.clone(),
        entries,
    })
}

/// Runs every stage for one (task, seed) and writes the seed report.
pub fn run_seed(cfg: &ExperimentConfig, task: TaskKind, seed: u64) -> Result<SeedReport> {
    let paths = RunPaths::new(cfg, task, seed);
    let tag = format!("[{task} {seed}]");
    let mut log = |msg: &str| eprintln!("{tag} {msg}");
    let started_unix = unix_now();
    let mut stages = Vec::new();

    let t = Instant::now();
    let (model, train_rec, reused) =
        train_stage(cfg, task, seed, &paths.checkpoint, &paths.train, cfg.resume, &mut log)?;
    stages.push(StageTiming {
        stage: "train".into(),
        reused,
        seconds: t.elapsed().as_secs_f64(),
    });
    let sha = train_rec.checkpoint_sha.clone();

    let t = Instant::now();
    let (importance, reused) = match read_if::<ImportanceFile>(cfg.resume && reused, &paths.importance)
        .filter(|f| f.checkpoint_sha == sha)
    {
        Some(f) => (f, true),
        None => {
            let f = importance_stage(cfg, &model, task, seed, &sha)?;
            fsio::write_json(&paths.importance, &f)?;
            (f, false)
        }
    };
    match importance.selection.chosen_length {
        Some(n) => log(&format!(
            "OOD length {n}, rho {:?}, heroes {}, bloats {}",
            importance.rho,
            importance.records.iter().filter(|r| r.category == Category::Hero).count(),
            importance.records.iter().filter(|r| r.category == Category::Bloat).count()
        )),
        None => log("no OOD length in band; excluded"),
    }
    stages.push(StageTiming {
        stage: "importance".into(),
        reused,
        seconds: t.elapsed().as_secs_f64(),
    });

    let t = Instant::now();
    let (pruning, reused) = match read_if::<PruningFile>(cfg.resume && reused, &paths.pruning)
        .filter(|f| f.checkpoint_sha == sha)
    {
        Some(f) => (f, true),
        None => {
            let f = pruning_stage(cfg, &model, &importance)?;
            fsio::write_json(&paths.pruning, &f)?;
            (f, false)
        }
    };
    stages.push(StageTiming {
        stage: "pruning".into(),
        reused,
        seconds: t.elapsed().as_secs_f64(),
    });

    let report = SeedReport::assemble(&train_rec, &importance, &pruning);
    fsio::write_json(&paths.report, &report)?;
    fsio::write_json(
        &paths.manifest,
        &RunManifest {
            task,
            seed,
            started_unix,
            finished_unix: unix_now(),
            stages,
        },
    )?;
    log("done");
    Ok(report)
}
