// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation (a configuration bug).
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or otherwise unusable number reached an operation that cannot handle it.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Every target position of a loss was masked out.
    #[error("empty loss mask")]
    EmptyLossMask,

    /// `backward` was called on something that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// Component name or index outside the model's registry.
    #[error("invalid component: {0}")]
    InvalidComponent(String),

    /// An operation received an empty collection where one element is required.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Token buffer too short for the example.
    #[error("pad_to {pad_to} is smaller than the {needed} tokens required")]
    PadTooSmall { needed: usize, pad_to: usize },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a NaN loss.
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    /// Causal importance needs a chosen OOD length.
    #[error("no OOD length qualified for evaluation")]
    NoOodLength,

    /// Malformed checkpoint or dataset file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
