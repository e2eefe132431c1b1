// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one JSON document, with CLI flags and the
//! `LAB_OUT` variable layered on top.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use causal_gap::checkpoint::sha256_hex;
use causal_gap::importance::EvalConfig;
use causal_gap::pruning::AblationKind;
use causal_gap::trainer::TrainConfig;
use causal_gap::{ModelConfig, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsio;

pub const DEFAULT_SEEDS: [u64; 10] = [42, 123, 456, 789, 1010, 2020, 3030, 4040, 5050, 6060];

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "LAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskKind>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    /// `train.seed` is ignored; each run uses its own seed.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Intervention used by the pruning experiments.
    pub ablation: AblationKind,
    pub output_dir: PathBuf,
    pub parallel: usize,
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationKind::Mean,
            output_dir: PathBuf::from("out"),
            parallel: 1,
            resume: false,
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub tasks: Option<Vec<TaskKind>>,
    pub seeds: Option<Vec<u64>>,
    pub parallel: Option<usize>,
    pub resume: bool,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The reduced configuration used for quick end-to-end checks.
    pub fn smoke() -> Self {
        Self {
            seeds: vec![42, 123, 456],
            model: ModelConfig {
                n_layers: 2,
                d_model: 64,
                d_ff: 256,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_steps: 2000,
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("out-smoke"),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }

    /// Layers `LAB_OUT` and then the CLI flags over the file values.
    pub fn resolve(mut self, env_out: Option<PathBuf>, flags: Overrides) -> Result<Self> {
        if let Some(out) = env_out {
            self.output_dir = out;
        }
        if let Some(out) = flags.output_dir {
            self.output_dir = out;
        }
        if let Some(tasks) = flags.tasks {
            self.tasks = tasks;
        }
        if let Some(seeds) = flags.seeds {
            self.seeds = seeds;
        }
        if let Some(p) = flags.parallel {
            self.parallel = p;
        }
        self.resume |= flags.resume;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.seeds.is_empty() {
            return Err(LabError::Config("tasks and seeds must be non-empty".into()));
        }
        if self.tasks.iter().collect::<BTreeSet<_>>().len() != self.tasks.len() {
            return Err(LabError::Config("duplicate task".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        if self.parallel == 0 {
            return Err(LabError::Config("parallel must be >= 1".into()));
        }
        if self.eval.grad_batches == 0 || self.eval.eval_size == 0 || self.eval.ood_lengths.is_empty() {
            return Err(LabError::Config(
                "grad_batches, eval_size and ood_lengths must be non-empty".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        let longest = self.eval.ood_lengths.iter().chain([&self.train.train_max_len]).max();
        if let Some(&n) = longest {
            if 2 * n + 2 > self.model.max_seq_len {
                return Err(LabError::Config(format!(
                    "length {n} needs {} positions but max_seq_len is {}",
                    2 * n + 2,
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Training configuration for one run.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Identifies everything that determines the trained checkpoint.
    pub fn train_hash(&self, task: TaskKind, seed: u64) -> String {
        short_hash(&serde_json::json!({
            "task": task,
            "seed": seed,
            "model": self.model,
            "train": self.train_for(seed),
        }))
    }

    /// Identifies everything that determines the analysis outputs.
    pub fn analysis_hash(&self, task: TaskKind, seed: u64) -> String {
        short_hash(&serde_json::json!({
            "train": self.train_hash(task, seed),
            "eval": self.eval,
            "ablation": self.ablation,
        }))
    }

    pub fn run_dir(&self, task: TaskKind, seed: u64) -> PathBuf {
        run_dir(&self.output_dir, task, seed)
    }
}

pub fn run_dir(out: &Path, task: TaskKind, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{task}-{seed}"))
}

fn short_hash(value: &serde_json::Value) -> String {
    let mut h = sha256_hex(value.to_string().as_bytes());
    h.truncate(16);
    h
}
