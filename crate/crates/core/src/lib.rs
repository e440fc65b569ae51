//! Multi-trait automated essay scoring.
//!
//! The crate is organised around the stages of a scoring experiment:
//!
//! - [`corpus`]: score schemas, essay ingestion, normalization and splitting.
//! - [`metrics`]: quadratic weighted kappa and report aggregation.
//! - [`encoder`] and [`model`]: a pluggable text encoder and the trainable
//!   multi-trait regressor with its weighted multi-task loss.
//! - [`adapt`]: low-rank adapters and the two-stage adapter sweep.
//! - [`calibrate`]: linear score alignment of test predictions.
//! - [`selftrain`]: MC-dropout uncertainty, balanced pseudo-label selection
//!   and one-shot self-training.
//! - [`pipeline`]: run configuration, stage orchestration and reports.
//!
//! [`synth`] generates synthetic corpora with known score generators; it is
//! used by the test suites and the CLI's demo data.

pub mod adapt;
pub mod calibrate;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod selftrain;
pub mod synth;

pub use error::{Error, Result};
