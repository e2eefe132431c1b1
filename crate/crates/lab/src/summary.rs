// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweep-level statistics over persisted seed reports.

use std::collections::BTreeMap;
use std::path::Path;

use causal_gap::importance::Category;
use causal_gap::pruning::{bloat_id_sweep, BloatSweep, PruneRecord};
use causal_gap::stats::{mean_std, MeanStd};
use causal_gap::{ComponentId, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsio;
use crate::pipeline::SEED_REPORT;
use crate::report::SeedReport;

pub const SUMMARY: &str = "summary.json";
pub const HERO_OOD: &str = "hero_top2_ood";
pub const BLOAT_OOD: &str = "bloat_top2_ood";
pub const BLOAT_ID: &str = "bloat_all_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub hero: usize,
    pub bloat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: ComponentId,
    pub count: usize,
}

/// OOD drops from top-2 pruning on seeds where both categories were pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPruning {
    pub seeds: Vec<u64>,
    pub hero_drop: MeanStd,
    pub bloat_drop: MeanStd,
    /// `hero_drop.mean − bloat_drop.mean`
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub converged_seeds: Vec<u64>,
    pub excluded_seeds: Vec<u64>,
    /// Over included seeds with a defined correlation. `std` is 0 when `n == 1`.
    pub rho: Option<MeanStd>,
    pub rho_single_seed: bool,
    /// Included seeds whose correlation was undefined (a constant score).
    pub rho_undefined_seeds: Vec<u64>,
    pub hero_total: usize,
    pub bloat_total: usize,
    pub layers: Vec<LayerCount>,
    /// Components by hero occurrences, most frequent first.
    pub hero_frequency: Vec<ComponentCount>,
    pub bloat_frequency: Vec<ComponentCount>,
    pub hero_prune_drop: Option<MeanStd>,
    pub bloat_prune_drop: Option<MeanStd>,
    pub paired_pruning: Option<PairedPruning>,
    pub bloat_id: BloatSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub tasks: Vec<TaskSummary>,
}

impl SummaryReport {
    pub fn task(&self, task: TaskKind) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Reads every `runs/*/seed_report.json` under `out`, ordered by task then seed.
pub fn load_reports(out: &Path) -> Result<Vec<SeedReport>> {
    let runs = out.join("runs");
    let mut reports = Vec::new();
    let entries = match std::fs::read_dir(&runs) {
        Ok(e) => e,
        Err(_) => return Err(LabError::NoReports(out.to_path_buf())),
    };
    for entry in entries {
        let entry = entry.map_err(|e| LabError::io(&runs, e))?;
        let path = entry.path().join(SEED_REPORT);
        if path.exists() {
            reports.push(fsio::read_json::<SeedReport>(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(LabError::NoReports(out.to_path_buf()));
    }
    reports.sort_by_key(|r| (r.task, r.seed));
    Ok(reports)
}

fn done_drop(record: Option<&PruneRecord>) -> Option<f64> {
    record.and_then(PruneRecord::outcome).map(|o| o.drop)
}

fn frequency(reports: &[&SeedReport], category: Category) -> Vec<ComponentCount> {
    let mut counts: BTreeMap<ComponentId, usize> = BTreeMap::new();
    for r in reports {
        for rec in r.records.iter().filter(|x| x.category == category) {
            *counts.entry(rec.component).or_default() += 1;
        }
    }
    let mut list: Vec<ComponentCount> = counts
        .into_iter()
        .map(|(component, count)| ComponentCount { component, count })
        .collect();
    // stable sort keeps canonical order among equal counts
    list.sort_by_key(|c| std::cmp::Reverse(c.count));
    list
}

pub fn summarize_task(task: TaskKind, all: &[SeedReport]) -> TaskSummary {
    let reports: Vec<&SeedReport> = all.iter().filter(|r| r.task == task).collect();
    let included: Vec<&SeedReport> = reports.iter().copied().filter(|r| !r.is_excluded()).collect();

    let rhos: Vec<f64> = included.iter().filter_map(|r| r.rho).collect();
    let rho = mean_std(&rhos);

    let n_layers = included
        .iter()
        .flat_map(|r| r.records.iter().map(|x| x.component.layer() + 1))
        .max()
        .unwrap_or(0);
    let mut layers: Vec<LayerCount> = (0..n_layers)
        .map(|layer| LayerCount { layer, hero: 0, bloat: 0 })
        .collect();
    for r in &included {
        for rec in &r.records {
            match rec.category {
                Category::Hero => layers[rec.component.layer()].hero += 1,
                Category::Bloat => layers[rec.component.layer()].bloat += 1,
                Category::Aligned => {}
            }
        }
    }

    let hero_drops: Vec<f64> = included.iter().filter_map(|r| done_drop(r.prune(HERO_OOD))).collect();
    let bloat_drops: Vec<f64> = included.iter().filter_map(|r| done_drop(r.prune(BLOAT_OOD))).collect();
    let paired: Vec<(u64, f64, f64)> = included
        .iter()
        .filter_map(|r| Some((r.seed, done_drop(r.prune(HERO_OOD))?, done_drop(r.prune(BLOAT_OOD))?)))
        .collect();
    let paired_pruning = match (
        mean_std(&paired.iter().map(|p| p.1).collect::<Vec<_>>()),
        mean_std(&paired.iter().map(|p| p.2).collect::<Vec<_>>()),
    ) {
        (Some(h), Some(b)) => Some(PairedPruning {
            seeds: paired.iter().map(|p| p.0).collect(),
            gap: h.mean - b.mean,
            hero_drop: h,
            bloat_drop: b,
        }),
        _ => None,
    };

    let bloat_id = bloat_id_sweep(
        &reports
            .iter()
            .map(|r| (r.seed, r.prune(BLOAT_ID).cloned()))
            .collect::<Vec<_>>(),
    );

    TaskSummary {
        task,
        seeds: reports.iter().map(|r| r.seed).collect(),
        converged_seeds: reports.iter().filter(|r| r.train.converged).map(|r| r.seed).collect(),
        excluded_seeds: reports.iter().filter(|r| r.is_excluded()).map(|r| r.seed).collect(),
        rho_single_seed: rho.is_some_and(|s| s.n == 1),
        rho,
        rho_undefined_seeds: included.iter().filter(|r| r.rho.is_none()).map(|r| r.seed).collect(),
        hero_total: included.iter().map(|r| r.hero_count).sum(),
        bloat_total: included.iter().map(|r| r.bloat_count).sum(),
        layers,
        hero_frequency: frequency(&included, Category::Hero),
        bloat_frequency: frequency(&included, Category::Bloat),
        hero_prune_drop: mean_std(&hero_drops),
        bloat_prune_drop: mean_std(&bloat_drops),
        paired_pruning,
        bloat_id,
    }
}

pub fn aggregate(reports: &[SeedReport]) -> SummaryReport {
    let mut tasks: Vec<TaskKind> = reports.iter().map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    SummaryReport {
        tasks: tasks.into_iter().map(|t| summarize_task(t, reports)).collect(),
    }
}

/// Loads the reports under `out`, aggregates them and writes `summary.json`.
pub fn aggregate_dir(out: &Path) -> Result<SummaryReport> {
    let summary = aggregate(&load_reports(out)?);
    fsio::write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}
