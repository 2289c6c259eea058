//! Multi-view clustering and classification with the Wyner variational
//! autoencoder, plus a synthetic CSI and traffic-state data pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod expfam;
pub mod model;
pub mod network;
pub mod seed;
pub mod simdata;
pub mod training;

#[cfg(test)]
mod testutil;

pub use config::ExperimentConfig;
pub use data::{Matrix, MultiViewDataset, Split};
pub use error::{Error, Result};
pub use expfam::Family;
pub use model::{ModelConfig, Supervision, ViewSpec, WvaeModel};
