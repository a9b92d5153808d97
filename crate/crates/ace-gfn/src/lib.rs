//! Training toolkit for cooperative GFlowNet samplers.
//!
//! The crate trains a canonical sampler toward an unnormalized target reward
//! while a second, divergently trained sampler concentrates on the regions the
//! canonical one under-serves; batches from both are mixed by an adaptive
//! weight derived from the two partition estimates. Plain trajectory-balance
//! training and two reward-shaping baselines share the same scaffolding, and
//! exact dynamic-programming oracles back the evaluation metrics and tests.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod trainer;

pub use error::{AceError, Result};
