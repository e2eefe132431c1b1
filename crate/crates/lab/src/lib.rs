// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seed sweeps over the causal-gap pipeline: configuration, per-run stage
//! files, aggregation and CSV export. The `lab` binary is a thin CLI over
//! this library.

pub mod config;
pub mod error;
pub mod export;
pub mod fsio;
pub mod pipeline;
pub mod pool;
pub mod report;
pub mod summary;

pub use config::{ExperimentConfig, Overrides};
pub use error::{LabError, Result};
pub use report::SeedReport;
pub use summary::{aggregate, SummaryReport};
