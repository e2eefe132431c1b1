// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop: fresh random batches every step, Adam, and a periodic
//! exact-match check on a fixed held-out set of in-distribution examples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{derive_seed, stream};
use crate::tasks::{exact_match_accuracy, generate, make_batch, MatchOptions, SampleSpec, TaskKind};

/// Seed of the fixed evaluation sets, independent of the training seed.
pub const EVAL_SEED: u64 = 20_260_101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub target_train_acc: f64,
    pub train_min_len: usize,
    pub train_max_len: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub seed: u64,
    /// Start each training row at a random position index; evaluation
    /// always starts at 0. Without it the last positions of the longest
    /// training sequences only ever predict EOS, so no longer sequence can
    /// be decoded, and positions past them are never trained.
    pub random_offsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 64,
            max_steps: 15_000,
            target_train_acc: 0.90,
            train_min_len: 3,
            train_max_len: 7,
            eval_every: 250,
            eval_size: 200,
            eval_seed: EVAL_SEED,
            seed: 42,
            random_offsets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_train_acc >= 0.0 && self.target_train_acc <= 1.0) {
            return Err(Error::Config(format!(
                "target_train_acc {} outside [0, 1]",
                self.target_train_acc
            )));
        }
        if self.max_steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::Config(
                "max_steps, batch_size, eval_every and eval_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The fixed held-out set used for the stopping rule.
    pub fn heldout_spec(&self, task: TaskKind) -> SampleSpec {
        SampleSpec {
            task,
            min_len: self.train_min_len,
            max_len: self.train_max_len,
            count: self.eval_size,
            seed: derive_seed(self.eval_seed, "heldout", 0),
        }
    }

    /// The fixed in-distribution evaluation set (distinct from the held-out set).
    pub fn id_eval_spec(&self, task: TaskKind) -> SampleSpec {
        SampleSpec {
            seed: derive_seed(self.eval_seed, "id-eval", 0),
            ..self.heldout_spec(task)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub steps_taken: usize,
    pub final_train_acc: f64,
    pub stopped_by: StopReason,
    /// Loss of the first batch, before any update.
    pub initial_loss: f64,
    pub curve: Vec<CurvePoint>,
}

/// Trains a freshly initialised model. `on_eval` is called at every
/// evaluation point.
pub fn train(
    task: TaskKind,
    model_config: ModelConfig,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&CurvePoint),
) -> Result<(Model, TrainResult)> {
    config.validate()?;
    let mut model = Model::init(model_config, derive_seed(config.seed, "model-init", 0))?;
    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let heldout = generate(&config.heldout_spec(task))?;

    let mut curve = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut window = (0.0, 0usize);
    let mut last_acc = 0.0;
    for step in 1..=config.max_steps {
        let examples = generate(&SampleSpec {
            task,
            min_len: config.train_min_len,
            max_len: config.train_max_len,
            count: config.batch_size,
            seed: derive_seed(config.seed, "train-batch", step as u64),
        })?;
        let mut batch = make_batch(&examples)?;
        if config.random_offsets {
            let room = model_config.max_seq_len.saturating_sub(batch.inputs.seq);
            let mut rng = stream(config.seed, "train-offset", step as u64);
            batch.inputs.offsets = (0..batch.inputs.batch).map(|_| rng.random_range(0..=room)).collect();
        }
        let (loss, grads) = model.loss_and_grads(&batch, None)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if step == 1 {
            initial_loss = loss;
        }
        window.0 += loss;
        window.1 += 1;
        adam_step(model.params_mut(), &grads, &mut state, &adam)?;

        if step % config.eval_every == 0 || step == config.max_steps {
            last_acc = exact_match_accuracy(&model.decoder(None), &heldout, MatchOptions::default())?;
            let point = CurvePoint {
                step,
                loss: window.0 / window.1 as f64,
                train_acc: last_acc,
            };
            on_eval(&point);
            curve.push(point);
            window = (0.0, 0);
            if last_acc >= config.target_train_acc {
                return Ok((
                    model,
                    TrainResult {
                        steps_taken: step,
                        final_train_acc: last_acc,
                        stopped_by: StopReason::TargetReached,
                        initial_loss,
                        curve,
                    },
                ));
            }
        }
    }
    Ok((
        model,
        TrainResult {
            steps_taken: config.max_steps,
            final_train_acc: last_acc,
            stopped_by: StopReason::MaxSteps,
            initial_loss,
            curve,
        },
    ))
}

/// Exact-match accuracy on the fixed in-distribution evaluation set.
pub fn id_accuracy(model: &Model, task: TaskKind, config: &TrainConfig) -> Result<f64> {
    let examples = generate(&config.id_eval_spec(task))?;
    exact_match_accuracy(&model.decoder(None), &examples, MatchOptions::default())
}
