// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat CSV tables for plotting and external analysis.
//!
//! | file                  | one row per                                  |
//! |-----------------------|----------------------------------------------|
//! | `scatter.csv`         | component of an included seed                |
//! | `layers.csv`          | task, layer and category                     |
//! | `pruning.csv`         | pruning experiment of a seed                 |
//! | `seeds.csv`           | seed                                         |
//! | `bloat_id_table.csv`  | seed with an all-bloats ID pruning outcome   |
//! | `warnings.csv`        | degenerate normalisation or skipped record   |

use std::path::Path;

use causal_gap::importance::Category;
use causal_gap::pruning::PruneRecord;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::report::SeedReport;
use crate::summary::SummaryReport;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub task: String,
    pub seed: u64,
    pub component: String,
    pub g_norm: f64,
    pub c_norm: f64,
    pub category: &'static str,
    pub g: f64,
    pub c: f64,
    pub rank_g: usize,
    pub rank_c: usize,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub task: String,
    pub layer: usize,
    pub category: &'static str,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruningRow {
    pub task: String,
    pub seed: u64,
    pub experiment: String,
    pub status: &'static str,
    pub n_pruned: usize,
    pub pruned: String,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    pub drop: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub task: String,
    pub seed: u64,
    pub excluded: bool,
    pub converged: bool,
    pub steps: usize,
    pub train_acc: f64,
    pub id_acc: f64,
    pub ood_len: Option<usize>,
    pub ood_acc: Option<f64>,
    pub rho: Option<f64>,
    pub heroes: usize,
    pub bloats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BloatIdRow {
    pub task: String,
    pub seed: u64,
    pub n_bloats: usize,
    pub id_base: f64,
    pub id_pruned: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarningRow {
    pub task: String,
    pub seed: u64,
    pub file: &'static str,
    pub message: String,
}

/// Min-max scaling to [0, 1]; all-equal input maps to 0.0 and returns `false`.
pub fn min_max(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return (vec![0.0; values.len()], false);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), true)
}

pub fn scatter_rows(reports: &[SeedReport], warnings: &mut Vec<WarningRow>) -> Vec<ScatterRow> {
    let mut rows = Vec::new();
    for r in reports.iter().filter(|r| !r.is_excluded()) {
        let g: Vec<f64> = r.records.iter().map(|x| x.g).collect();
        let c: Vec<f64> = r.records.iter().map(|x| x.c).collect();
        let (gn, g_ok) = min_max(&g);
        let (cn, c_ok) = min_max(&c);
        for (axis, ok) in [("G", g_ok), ("C", c_ok)] {
            if !ok {
                warnings.push(WarningRow {
                    task: r.task.to_string(),
                    seed: r.seed,
                    file: "scatter.csv",
                    message: format!("all {axis} values equal; normalised {axis} set to 0.0"),
                });
            }
        }
        for (i, rec) in r.records.iter().enumerate() {
            rows.push(ScatterRow {
                task: r.task.to_string(),
                seed: r.seed,
                component: rec.component.to_string(),
                g_norm: gn[i],
                c_norm: cn[i],
                category: rec.category.name(),
                g: rec.g,
                c: rec.c,
                rank_g: rec.rank_g,
                rank_c: rec.rank_c,
                delta: rec.delta,
            });
        }
    }
    rows
}

pub fn layer_rows(summary: &SummaryReport) -> Vec<LayerRow> {
    let mut rows = Vec::new();
    for t in &summary.tasks {
        for l in &t.layers {
            for (category, count) in [(Category::Hero, l.hero), (Category::Bloat, l.bloat)] {
                rows.push(LayerRow {
                    task: t.task.to_string(),
                    layer: l.layer,
                    category: category.name(),
                    count,
                });
            }
        }
    }
    rows
}

pub fn pruning_rows(reports: &[SeedReport], warnings: &mut Vec<WarningRow>) -> Vec<PruningRow> {
    let mut rows = Vec::new();
    for r in reports {
        for e in &r.pruning {
            let row = match &e.record {
                PruneRecord::Done(o) => PruningRow {
                    task: r.task.to_string(),
                    seed: r.seed,
                    experiment: e.name.clone(),
                    status: "done",
                    n_pruned: o.pruned.len(),
                    pruned: o.pruned.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
                    acc_before: Some(o.acc_before),
                    acc_after: Some(o.acc_after),
                    drop: Some(o.drop),
                    reason: String::new(),
                },
                PruneRecord::Skipped { reason, .. } => {
                    warnings.push(WarningRow {
                        task: r.task.to_string(),
                        seed: r.seed,
                        file: "pruning.csv",
                        message: format!("{} skipped: {reason}", e.name),
                    });
                    PruningRow {
                        task: r.task.to_string(),
                        seed: r.seed,
                        experiment: e.name.clone(),
                        status: "skipped",
                        n_pruned: 0,
                        pruned: String::new(),
                        acc_before: None,
                        acc_after: None,
                        drop: None,
                        reason: reason.clone(),
                    }
                }
            };
            rows.push(row);
        }
    }
    rows
}

pub fn seed_rows(reports: &[SeedReport]) -> Vec<SeedRow> {
    reports
        .iter()
        .map(|r| SeedRow {
            task: r.task.to_string(),
            seed: r.seed,
            excluded: r.is_excluded(),
            converged: r.train.converged,
            steps: r.train.steps_taken,
            train_acc: r.train.final_train_acc,
            id_acc: r.id_accuracy,
            ood_len: r.selection.chosen_length,
            ood_acc: r.selection.acc_base,
            rho: r.rho,
            heroes: r.hero_count,
            bloats: r.bloat_count,
        })
        .collect()
}

pub fn bloat_id_rows(summary: &SummaryReport) -> Vec<BloatIdRow> {
    summary
        .tasks
        .iter()
        .flat_map(|t| {
            t.bloat_id.rows.iter().map(move |b| BloatIdRow {
                task: t.task.to_string(),
                seed: b.seed,
                n_bloats: b.n_bloats,
                id_base: b.id_base,
                id_pruned: b.id_pruned,
                drop: b.drop,
            })
        })
        .collect()
}

/// Writes rows with a header line. The header is written even when there
/// are no rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub const SCATTER_HEADER: &[&str] = &[
    "task", "seed", "component", "G_norm", "C_norm", "category", "G", "C", "rank_G", "rank_C", "delta",
];
pub const LAYER_HEADER: &[&str] = &["task", "layer", "category", "count"];
pub const PRUNING_HEADER: &[&str] = &[
    "task", "seed", "experiment", "status", "n_pruned", "pruned", "acc_before", "acc_after", "drop", "reason",
];
pub const SEED_HEADER: &[&str] = &[
    "task", "seed", "excluded", "converged", "steps", "train_acc", "id_acc", "ood_len", "ood_acc", "rho",
    "heroes", "bloats",
];
pub const BLOAT_ID_HEADER: &[&str] = &["task", "seed", "n_bloats", "id_base", "id_pruned", "drop"];
pub const WARNING_HEADER: &[&str] = &["task", "seed", "file", "message"];

/// Writes all CSV tables into `out`.
pub fn export_csv(out: &Path, reports: &[SeedReport], summary: &SummaryReport) -> Result<Vec<WarningRow>> {
    let mut warnings = Vec::new();
    let scatter = scatter_rows(reports, &mut warnings);
    let pruning = pruning_rows(reports, &mut warnings);
    write_csv(&out.join("scatter.csv"), SCATTER_HEADER, &scatter)?;
    write_csv(&out.join("layers.csv"), LAYER_HEADER, &layer_rows(summary))?;
    write_csv(&out.join("pruning.csv"), PRUNING_HEADER, &pruning)?;
    write_csv(&out.join("seeds.csv"), SEED_HEADER, &seed_rows(reports))?;
    write_csv(&out.join("bloat_id_table.csv"), BLOAT_ID_HEADER, &bloat_id_rows(summary))?;
    write_csv(&out.join("warnings.csv"), WARNING_HEADER, &warnings)?;
    Ok(warnings)
}
