// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains small decoder-only Transformers on sequence reversal and sorting,
//! then compares two importance measures for every attention head and MLP:
//! the gradient norm of the component's weights and the accuracy drop under
//! mean ablation.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod importance;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{AblationPlan, ComponentId, MeanMode, Model, ModelConfig, Replacement};
pub use tasks::{TaskExample, TaskKind};
pub use tensor::Tensor;
