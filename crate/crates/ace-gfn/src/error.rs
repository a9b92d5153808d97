//! Error types shared across the toolkit.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, AceError>;

#[derive(Debug, Error)]
pub enum AceError {
    /// A non-terminal state exposed an all-false action mask.
    #[error("malformed environment: non-terminal state {state} allows no actions")]
    MalformedEnvironment { state: String },

    /// Backward sampling walked into a state with no parents before reaching the root.
    #[error("state {state} is not reachable from the initial state")]
    UnreachableState { state: String },

    /// A trajectory step uses an action the environment masks out.
    #[error("invalid trajectory: step {step} takes masked action {action}")]
    InvalidTrajectory { step: usize, action: usize },

    /// State discovery hit the enumeration cap before exhausting the graph.
    #[error("state enumeration exceeded the cap of {cap} states")]
    EnumerationTooLarge { cap: usize },

    /// An action mask excludes every action where at least one is required.
    #[error("action mask allows no actions")]
    EmptyActionSet,

    /// A numeric primitive produced a non-finite value.
    #[error("non-finite value produced by `{op}`")]
    NumericalFailure { op: &'static str },

    /// A batch carried nonzero mixing weight but no trajectories.
    #[error("empty batch on a side with nonzero mixing weight")]
    InvalidBatch,

    /// A distribution argument carried negative mass.
    #[error("distribution has negative mass ({mass}) at entry {index}")]
    InvalidDistribution { index: usize, mass: f64 },

    /// A measure places mass outside its required support.
    #[error("measure places mass outside the over-allocated trajectory set")]
    InvalidMeasure,

    /// A knapsack multiplicity vector violates its weight budget.
    #[error("multiplicities exceed the weight budget ({load} > {budget})")]
    Infeasible { load: f64, budget: f64 },

    /// Training hit a non-finite loss or gradient and stopped.
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: u64, reason: String },

    /// Some runs of a multi-run command failed; the rest completed and their
    /// aggregates were still written.
    #[error("{failed} of {total} runs failed; see the manifest for details")]
    RunsFailed { failed: usize, total: usize },

    /// Configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
