// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pruning interventions: mean-ablate a set of heroes or bloats together and
//! measure accuracy on the OOD or in-distribution evaluation set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{Category, EvalConfig, ImportanceRecord, OodSelection};
use crate::model::{AblationPlan, ComponentId, Model, Replacement};
use crate::stats::{mean_std, MeanStd};
use crate::tasks::{exact_match_accuracy, generate, TaskExample, TaskKind};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneSelection {
    TopK(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ood,
    Id,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Mean,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub category: Category,
    pub selection: PruneSelection,
    pub metric: Metric,
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.category == Category::Aligned {
            return Err(Error::Config("only heroes or bloats can be pruned".into()));
        }
        if self.selection == PruneSelection::TopK(0) {
            return Err(Error::Config("top-k pruning needs k >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub spec: PruneSpec,
    pub pruned: Vec<ComponentId>,
    pub acc_before: f64,
    pub acc_after: f64,
    /// `acc_before − acc_after`; negative when pruning helped.
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum PruneRecord {
    Done(PruneOutcome),
    Skipped { spec: PruneSpec, reason: String },
}

impl PruneRecord {
    pub fn outcome(&self) -> Option<&PruneOutcome> {
        match self {
            PruneRecord::Done(o) => Some(o),
            PruneRecord::Skipped { .. } => None,
        }
    }

    pub fn spec(&self) -> &PruneSpec {
        match self {
            PruneRecord::Done(o) => &o.spec,
            PruneRecord::Skipped { spec, .. } => spec,
        }
    }
}

/// Members of the requested category, most extreme gap first: heroes by
/// most negative delta, bloats by most positive; ties go to the larger
/// `|C|`, then canonical order.
pub fn select_components(records: &[ImportanceRecord], spec: &PruneSpec) -> Vec<ComponentId> {
    let mut members: Vec<&ImportanceRecord> =
        records.iter().filter(|r| r.category == spec.category).collect();
    members.sort_by(|a, b| {
        let extremity = match spec.category {
            Category::Hero => a.delta.cmp(&b.delta),
            _ => b.delta.cmp(&a.delta),
        };
        extremity
            .then(b.c.abs().total_cmp(&a.c.abs()))
            .then(a.component.cmp(&b.component))
    });
    let k = match spec.selection {
        PruneSelection::TopK(k) => k,
        PruneSelection::All => members.len(),
    };
    members.into_iter().take(k).map(|r| r.component).collect()
}

/// Everything needed to score interventions on one metric set.
pub struct PruneContext<'a> {
    pub model: &'a Model,
    pub examples: Vec<TaskExample>,
    pub means: AblationPlan,
    pub acc_before: f64,
    pub kind: AblationKind,
    pub cfg: &'a EvalConfig,
}

impl<'a> PruneContext<'a> {
    /// Builds the evaluation set for `metric` and computes replacement means
    /// on that same distribution.
    pub fn new(
        model: &'a Model,
        task: TaskKind,
        metric: Metric,
        selection: &OodSelection,
        eval: &'a EvalConfig,
        train: &TrainConfig,
        kind: AblationKind,
    ) -> Result<Self> {
        let examples = match metric {
            Metric::Ood => {
                let length = selection.chosen_length.ok_or(Error::NoOodLength)?;
                eval.ood_examples(task, length)?
            }
            Metric::Id => generate(&train.id_eval_spec(task))?,
        };
        let means = model.mean_activations(&examples, &model.components(), eval.mean_mode)?;
        let acc_before = match (metric, selection.acc_base) {
            (Metric::Ood, Some(a)) => a,
            _ => exact_match_accuracy(&model.decoder(None), &examples, eval.match_opts)?,
        };
        Ok(Self {
            model,
            examples,
            means,
            acc_before,
            kind,
            cfg: eval,
        })
    }

    pub fn plan_for(&self, ids: &[ComponentId]) -> AblationPlan {
        ids.iter()
            .map(|id| {
                let rep = match self.kind {
                    AblationKind::Mean => self.means[id].clone(),
                    AblationKind::Zero => Replacement::Zero,
                };
                (*id, rep)
            })
            .collect()
    }

    pub fn accuracy_with(&self, ids: &[ComponentId]) -> Result<f64> {
        let plan = self.plan_for(ids);
        exact_match_accuracy(&self.model.decoder(Some(&plan)), &self.examples, self.cfg.match_opts)
    }

    pub fn prune_and_eval(&self, records: &[ImportanceRecord], spec: PruneSpec) -> Result<PruneRecord> {
        spec.validate()?;
        let pruned = select_components(records, &spec);
        if pruned.is_empty() {
            return Ok(PruneRecord::Skipped {
                spec,
                reason: format!("empty category: no {} components", spec.category.name()),
            });
        }
        let acc_after = self.accuracy_with(&pruned)?;
        Ok(PruneRecord::Done(PruneOutcome {
            spec,
            pruned,
            acc_before: self.acc_before,
            acc_after,
            drop: self.acc_before - acc_after,
        }))
    }
}

/// One row of the all-bloats in-distribution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloatRow {
    pub seed: u64,
    pub n_bloats: usize,
    pub id_base: f64,
    pub id_pruned: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloatSweep {
    pub rows: Vec<BloatRow>,
    /// Seeds left out, with the reason.
    pub excluded: Vec<(u64, String)>,
    pub drop: Option<MeanStd>,
}

impl BloatSweep {
    /// Whether some seed improved by at least `helped` and some other
    /// dropped by at least `hurt` (both as accuracy fractions).
    pub fn bimodal(&self, helped: f64, hurt: f64) -> bool {
        self.rows.iter().any(|r| r.drop <= -helped) && self.rows.iter().any(|r| r.drop >= hurt)
    }
}

/// Aggregates per-seed all-bloats ID outcomes. Seeds whose record was
/// skipped (no bloats, no valid OOD length) are listed as excluded.
pub fn bloat_id_sweep(per_seed: &[(u64, Option<PruneRecord>)]) -> BloatSweep {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (seed, record) in per_seed {
        match record {
            Some(PruneRecord::Done(o)) => rows.push(BloatRow {
                seed: *seed,
                n_bloats: o.pruned.len(),
                id_base: o.acc_before,
                id_pruned: o.acc_after,
                drop: o.drop,
            }),
            Some(PruneRecord::Skipped { reason, .. }) => excluded.push((*seed, reason.clone())),
            None => excluded.push((*seed, "no valid OOD length".to_string())),
        }
    }
    let drops: Vec<f64> = rows.iter().map(|r| r.drop).collect();
    BloatSweep {
        drop: mean_std(&drops),
        rows,
        excluded,
    }
}
