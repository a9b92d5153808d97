//! Benchmark environments plus an explicit-table DAG for fixtures.

pub mod bag;
pub mod bitseq;
pub mod explicit;
pub mod grid;
pub mod knapsack;
pub mod seqdesign;
pub mod walk;

pub use bag::Bag;
pub use bitseq::BitSequence;
pub use explicit::ExplicitDag;
pub use grid::GridWorld;
pub use knapsack::Knapsack;
pub use seqdesign::SequenceDesign;
pub use walk::{LazyRandomWalk, WalkReward};

/// Trailing tokens visible to sequence policies (plus the length feature).
pub const TOKEN_WINDOW: usize = 6;
