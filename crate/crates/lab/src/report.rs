// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-run files: stage outputs and the seed report.

use causal_gap::importance::{Category, ImportanceRecord, OodSelection};
use causal_gap::pruning::{PruneRecord, PruneSelection, PruneSpec};
use causal_gap::trainer::{StopReason, TrainResult};
use causal_gap::{ComponentId, TaskKind};
use serde::{Deserialize, Serialize};

/// Output of the training stage, saved next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub task: TaskKind,
    pub seed: u64,
    pub train_hash: String,
    pub checkpoint_sha: String,
    /// Accuracy on the fixed in-distribution evaluation set.
    pub id_accuracy: f64,
    pub result: TrainResult,
}

/// Output of the OOD selection, gradient and ablation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceFile {
    pub task: TaskKind,
    pub seed: u64,
    pub analysis_hash: String,
    pub checkpoint_sha: String,
    pub selection: OodSelection,
    /// Accuracy with each component ablated alone; empty when excluded.
    pub ablated_accuracy: Vec<(ComponentId, f64)>,
    pub rho: Option<f64>,
    pub records: Vec<ImportanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEntry {
    pub name: String,
    pub record: PruneRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningFile {
    pub task: TaskKind,
    pub seed: u64,
    pub analysis_hash: String,
    pub checkpoint_sha: String,
    pub entries: Vec<PruneEntry>,
}

/// Stable name of a pruning experiment, e.g. `hero_top2_ood`.
pub fn prune_name(spec: &PruneSpec) -> String {
    let sel = match spec.selection {
        PruneSelection::TopK(k) => format!("top{k}"),
        PruneSelection::All => "all".to_string(),
    };
    let metric = serde_json::to_value(spec.metric)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    format!("{}_{sel}_{metric}", spec.category.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_taken: usize,
    pub final_train_acc: f64,
    pub stopped_by: StopReason,
    pub converged: bool,
    pub initial_loss: f64,
    /// Mean loss over the last evaluation window.
    pub final_loss: Option<f64>,
}

impl TrainSummary {
    pub fn from_result(r: &TrainResult) -> Self {
        Self {
            steps_taken: r.steps_taken,
            final_train_acc: r.final_train_acc,
            stopped_by: r.stopped_by,
            converged: r.stopped_by == StopReason::TargetReached,
            initial_loss: r.initial_loss,
            final_loss: r.curve.last().map(|p| p.loss),
        }
    }
}

/// Everything measured for one (task, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub task: TaskKind,
    pub seed: u64,
    pub analysis_hash: String,
    pub checkpoint_sha: String,
    pub train: TrainSummary,
    pub id_accuracy: f64,
    pub selection: OodSelection,
    /// Set when no OOD length fell in the accuracy band.
    pub excluded: Option<String>,
    pub rho: Option<f64>,
    pub hero_count: usize,
    pub bloat_count: usize,
    pub aligned_count: usize,
    pub records: Vec<ImportanceRecord>,
    pub pruning: Vec<PruneEntry>,
}

impl SeedReport {
    pub fn assemble(train: &TrainRecord, importance: &ImportanceFile, pruning: &PruningFile) -> Self {
        let count = |c: Category| importance.records.iter().filter(|r| r.category == c).count();
        Self {
            task: train.task,
            seed: train.seed,
            analysis_hash: importance.analysis_hash.clone(),
            checkpoint_sha: train.checkpoint_sha.clone(),
            train: TrainSummary::from_result(&train.result),
            id_accuracy: train.id_accuracy,
            selection: importance.selection.clone(),
            excluded: importance
                .selection
                .chosen_length
                .is_none()
                .then(|| "no OOD length with accuracy in band".to_string()),
            rho: importance.rho,
            hero_count: count(Category::Hero),
            bloat_count: count(Category::Bloat),
            aligned_count: count(Category::Aligned),
            records: importance.records.clone(),
            pruning: pruning.entries.clone(),
        }
    }

    pub fn is_excluded(&self) -> bool {
        self.excluded.is_some()
    }

    pub fn prune(&self, name: &str) -> Option<&PruneRecord> {
        self.pruning.iter().find(|e| e.name == name).map(|e| &e.record)
    }
}
