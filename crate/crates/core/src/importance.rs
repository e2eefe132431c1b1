// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two importance scores per component and the gap between their rankings.
//!
//! * `G`: mean Frobenius norm, over fresh batches at the OOD length, of the
//!   loss gradient with respect to the component's weight block.
//! * `C`: exact-match accuracy lost when the component's output is replaced
//!   by its mean over the OOD evaluation set.
//!
//! Components are then ranked on both scores. The rank difference
//! `rank_G − rank_C` flags low-gradient components that matter causally
//! (heroes) and high-gradient components that do not (bloats).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationPlan, ComponentId, MeanMode, Model};
use crate::rng::derive_seed;
use crate::stats::{ordinal_ranks, spearman};
use crate::tasks::{exact_match_accuracy, generate, make_batch, MatchOptions, SampleSpec, TaskExample, TaskKind};
use crate::trainer::EVAL_SEED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Examples per evaluation set.
    pub eval_size: usize,
    pub ood_lengths: Vec<usize>,
    /// Inclusive accuracy band an OOD length must fall in.
    pub acc_min: f64,
    pub acc_max: f64,
    pub eval_seed: u64,
    pub grad_batches: usize,
    pub grad_batch_size: usize,
    pub match_opts: MatchOptions,
    pub mean_mode: MeanMode,
    /// `|delta|` at which a component counts as a hero or bloat.
    pub gap_threshold: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_size: 200,
            ood_lengths: vec![8, 9, 10, 11],
            acc_min: 0.20,
            acc_max: 0.75,
            eval_seed: EVAL_SEED,
            grad_batches: 50,
            grad_batch_size: 64,
            match_opts: MatchOptions::default(),
            mean_mode: MeanMode::Pooled,
            gap_threshold: 6,
        }
    }
}

impl EvalConfig {
    /// The fixed evaluation set at one OOD length.
    pub fn ood_examples(&self, task: TaskKind, length: usize) -> Result<Vec<TaskExample>> {
        generate(&SampleSpec::fixed(
            task,
            length,
            self.eval_size,
            derive_seed(self.eval_seed, "ood-eval", length as u64),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthAccuracy {
    pub length: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSelection {
    pub chosen_length: Option<usize>,
    pub accuracies: Vec<LengthAccuracy>,
    pub acc_base: Option<f64>,
}

/// Smallest length whose accuracy lies in `[lo, hi]`.
pub fn choose_length(accuracies: &[LengthAccuracy], lo: f64, hi: f64) -> Option<&LengthAccuracy> {
    accuracies
        .iter()
        .filter(|a| a.accuracy >= lo && a.accuracy <= hi)
        .min_by_key(|a| a.length)
}

pub fn select_ood_length(model: &Model, task: TaskKind, cfg: &EvalConfig) -> Result<OodSelection> {
    let mut accuracies = Vec::with_capacity(cfg.ood_lengths.len());
    for &length in &cfg.ood_lengths {
        let examples = cfg.ood_examples(task, length)?;
        let accuracy = exact_match_accuracy(&model.decoder(None), &examples, cfg.match_opts)?;
        accuracies.push(LengthAccuracy { length, accuracy });
    }
    let chosen = choose_length(&accuracies, cfg.acc_min, cfg.acc_max).copied();
    Ok(OodSelection {
        chosen_length: chosen.map(|c| c.length),
        acc_base: chosen.map(|c| c.accuracy),
        accuracies,
    })
}

/// Frobenius norm of each component's weight-block gradient on one batch.
pub fn gradient_norms(model: &Model, examples: &[TaskExample]) -> Result<BTreeMap<ComponentId, f64>> {
    let batch = make_batch(examples)?;
    let (_, grads) = model.loss_and_grads(&batch, None)?;
    model
        .components()
        .into_iter()
        .map(|id| {
            let w = model.component_weights(id)?;
            Ok((id, w.frobenius(&grads[w.param])))
        })
        .collect()
}

/// Mean gradient norm per component over `grad_batches` fresh batches at
/// `length`. Batches come from their own stream keyed by `seed`, disjoint
/// from the evaluation sets.
pub fn gradient_magnitude(
    model: &Model,
    task: TaskKind,
    length: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<BTreeMap<ComponentId, f64>> {
    if cfg.grad_batches == 0 {
        return Err(Error::Config("grad_batches must be >= 1".into()));
    }
    let mut total: BTreeMap<ComponentId, f64> = BTreeMap::new();
    for b in 0..cfg.grad_batches {
        let examples = generate(&SampleSpec::fixed(
            task,
            length,
            cfg.grad_batch_size,
            derive_seed(seed, "grad-batch", (length * 1_000_000 + b) as u64),
        ))?;
        for (id, g) in gradient_norms(model, &examples)? {
            *total.entry(id).or_default() += g;
        }
    }
    for g in total.values_mut() {
        *g /= cfg.grad_batches as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct CausalResult {
    pub acc_base: f64,
    /// Accuracy with each component mean-ablated on its own.
    pub ablated: BTreeMap<ComponentId, f64>,
    /// `acc_base − ablated`.
    pub importance: BTreeMap<ComponentId, f64>,
    /// The replacement means, reused by pruning.
    pub means: AblationPlan,
}

/// Mean-ablates each component in turn on the fixed OOD evaluation set.
pub fn causal_importance(
    model: &Model,
    task: TaskKind,
    selection: &OodSelection,
    cfg: &EvalConfig,
) -> Result<CausalResult> {
    let length = selection.chosen_length.ok_or(Error::NoOodLength)?;
    let examples = cfg.ood_examples(task, length)?;
    let ids = model.components();
    let means = model.mean_activations(&examples, &ids, cfg.mean_mode)?;
    let acc_base = match selection.acc_base {
        Some(a) => a,
        None => exact_match_accuracy(&model.decoder(None), &examples, cfg.match_opts)?,
    };
    let mut ablated = BTreeMap::new();
    let mut importance = BTreeMap::new();
    for id in ids {
        let plan: AblationPlan = [(id, means[&id].clone())].into_iter().collect();
        let acc = exact_match_accuracy(&model.decoder(Some(&plan)), &examples, cfg.match_opts)?;
        ablated.insert(id, acc);
        importance.insert(id, acc_base - acc);
    }
    Ok(CausalResult {
        acc_base,
        ablated,
        importance,
        means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Hero,
    Bloat,
    Aligned,
}

impl Category {
    pub fn from_delta(delta: i64, threshold: i64) -> Self {
        if delta <= -threshold {
            Category::Hero
        } else if delta >= threshold {
            Category::Bloat
        } else {
            Category::Aligned
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Hero => "hero",
            Category::Bloat => "bloat",
            Category::Aligned => "aligned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub component: ComponentId,
    /// Gradient magnitude.
    pub g: f64,
    /// Causal importance (accuracy drop, may be negative).
    pub c: f64,
    pub rank_g: usize,
    pub rank_c: usize,
    /// `rank_g − rank_c`
    pub delta: i64,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub records: Vec<ImportanceRecord>,
    /// Spearman correlation of G and C; `None` when either is constant.
    pub rho: Option<f64>,
}

impl Classification {
    pub fn count(&self, category: Category) -> usize {
        self.records.iter().filter(|r| r.category == category).count()
    }
}

/// Ranks both scores (ordinal, ties by canonical component order), takes the
/// rank gap, and assigns categories.
pub fn classify(
    g: &BTreeMap<ComponentId, f64>,
    c: &BTreeMap<ComponentId, f64>,
    threshold: i64,
) -> Result<Classification> {
    if g.len() != c.len() || g.keys().ne(c.keys()) {
        return Err(Error::InvalidComponent(
            "gradient and causal scores cover different components".into(),
        ));
    }
    if g.is_empty() {
        return Err(Error::Empty("importance scores"));
    }
    // BTreeMap iteration is canonical order
    let ids: Vec<ComponentId> = g.keys().copied().collect();
    let gv: Vec<f64> = g.values().copied().collect();
    let cv: Vec<f64> = c.values().copied().collect();
    if gv.iter().chain(&cv).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classify"));
    }
    let rg = ordinal_ranks(&gv);
    let rc = ordinal_ranks(&cv);
    let records = ids
        .iter()
        .enumerate()
        .map(|(i, &component)| {
            let delta = rg[i] as i64 - rc[i] as i64;
            ImportanceRecord {
                component,
                g: gv[i],
                c: cv[i],
                rank_g: rg[i],
                rank_c: rc[i],
                delta,
                category: Category::from_delta(delta, threshold),
            }
        })
        .collect();
    Ok(Classification {
        records,
        rho: spearman(&gv, &cv),
    })
}
