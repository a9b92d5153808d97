//! Run configuration: environment instances, method selection, and
//! per-environment training defaults, all serializable so a run can be
//! reproduced from its manifest.

use serde::{Deserialize, Serialize};

use crate::envs::{
    Bag, BitSequence, GridWorld, Knapsack, LazyRandomWalk, SequenceDesign,
};
use crate::error::{AceError, Result};
use crate::graph::StateGraph;
use crate::losses::{NoveltyShaping, TeacherShaping};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    Grid {
        dim: usize,
        side: usize,
    },
    WalkRings {
        half_width: usize,
    },
    WalkGaussians {
        half_width: usize,
    },
    BitSeq {
        len: usize,
        n_modes: usize,
        mode_seed: u64,
    },
    SeqDesign {
        len: usize,
        vocab: usize,
        instance_seed: u64,
    },
    Bag {
        n_items: usize,
        capacity: usize,
        instance_seed: u64,
    },
    Knapsack {
        n_types: usize,
        max_copies: i32,
        budget: f64,
        instance_seed: u64,
    },
}

impl EnvConfig {
    pub fn grid_default() -> Self {
        EnvConfig::Grid { dim: 2, side: 16 }
    }

    pub fn walk_rings_default() -> Self {
        EnvConfig::WalkRings { half_width: 18 }
    }

    pub fn walk_gaussians_default() -> Self {
        EnvConfig::WalkGaussians { half_width: 18 }
    }

    pub fn bitseq_default() -> Self {
        EnvConfig::BitSeq {
            len: 32,
            n_modes: 60,
            mode_seed: 2024,
        }
    }

    pub fn seqdesign_default() -> Self {
        EnvConfig::SeqDesign {
            len: 24,
            vocab: 6,
            instance_seed: 2024,
        }
    }

    pub fn bag_default() -> Self {
        EnvConfig::Bag {
            n_items: 20,
            capacity: 10,
            instance_seed: 2024,
        }
    }

    pub fn knapsack_default() -> Self {
        EnvConfig::Knapsack {
            n_types: 128,
            max_copies: 4,
            budget: 60.0,
            instance_seed: 2024,
        }
    }

    /// Parses a short environment name into its default configuration.
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "grid" => Self::grid_default(),
            "walk_rings" => Self::walk_rings_default(),
            "walk_gaussians" => Self::walk_gaussians_default(),
            "bitseq" => Self::bitseq_default(),
            "seqdesign" => Self::seqdesign_default(),
            "bag" => Self::bag_default(),
            "knapsack" => Self::knapsack_default(),
            other => {
                return Err(AceError::Config(format!(
                    "unknown environment '{other}' (expected grid, walk_rings, \
                     walk_gaussians, bitseq, seqdesign, bag, knapsack)"
                )));
            }
        })
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvConfig::Grid { .. } => "grid",
            EnvConfig::WalkRings { .. } => "walk_rings",
            EnvConfig::WalkGaussians { .. } => "walk_gaussians",
            EnvConfig::BitSeq { .. } => "bitseq",
            EnvConfig::SeqDesign { .. } => "seqdesign",
            EnvConfig::Bag { .. } => "bag",
            EnvConfig::Knapsack { .. } => "knapsack",
        }
    }

    pub fn build(&self) -> Box<dyn StateGraph> {
        match self {
            EnvConfig::Grid { dim, side } => Box::new(GridWorld::new(*dim, *side)),
            EnvConfig::WalkRings { half_width } => Box::new(LazyRandomWalk::rings(*half_width)),
            EnvConfig::WalkGaussians { half_width } => {
                Box::new(LazyRandomWalk::eight_gaussians(*half_width))
            }
            EnvConfig::BitSeq {
                len,
                n_modes,
                mode_seed,
            } => Box::new(BitSequence::new(*len, *n_modes, *mode_seed)),
            EnvConfig::SeqDesign {
                len,
                vocab,
                instance_seed,
            } => Box::new(SequenceDesign::new(*len, *vocab, *instance_seed)),
            EnvConfig::Bag {
                n_items,
                capacity,
                instance_seed,
            } => Box::new(Bag::new(*n_items, *capacity, *instance_seed)),
            EnvConfig::Knapsack {
                n_types,
                max_copies,
                budget,
                instance_seed,
            } => Box::new(Knapsack::new(*n_types, *max_copies, *budget, *instance_seed)),
        }
    }

    /// Token alphabet size for sequence environments (`None` for vector
    /// feature environments).
    pub fn vocab(&self) -> Option<usize> {
        match self {
            EnvConfig::BitSeq { .. } => Some(2),
            EnvConfig::SeqDesign { vocab, .. } => Some(*vocab),
            _ => None,
        }
    }

    /// Whether the environment defines a canonical mode structure for the
    /// mode-discovery metric.
    pub fn has_modes(&self) -> bool {
        matches!(
            self,
            EnvConfig::Grid { .. }
                | EnvConfig::WalkRings { .. }
                | EnvConfig::WalkGaussians { .. }
                | EnvConfig::BitSeq { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cooperative pair: canonical sampler plus a divergently trained one.
    Ace,
    /// Single sampler with epsilon-greedy exploration.
    Tb,
    /// Canonical sampler plus a residual-shaped teacher.
    At,
    /// Canonical sampler plus a novelty-shaped sampler.
    Sa,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::Ace => "ace",
            Method::Tb => "tb",
            Method::At => "at",
            Method::Sa => "sa",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "ace" => Method::Ace,
            "tb" => Method::Tb,
            "at" => Method::At,
            "sa" => Method::Sa,
            other => {
                return Err(AceError::Config(format!(
                    "unknown method '{other}' (expected ace, tb, at, sa)"
                )));
            }
        })
    }

    /// Whether the method trains a second sampler alongside the canonical
    /// one (and therefore splits the per-iteration trajectory budget).
    pub fn two_samplers(&self) -> bool {
        !matches!(self, Method::Tb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub method: Method,
    pub seed: u64,
    pub iterations: usize,
    /// Total trajectories drawn per iteration across all samplers.
    pub batch_size: usize,
    pub epsilon: f64,
    /// Coverage threshold for the allocation verdict.
    pub alpha: f64,
    /// Reward tempering for the divergent sampler.
    pub beta: f64,
    pub lr_policy: f64,
    pub lr_log_z: f64,
    /// Final learning-rate multiplier of the linear schedule.
    pub lr_end_factor: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub top_k: usize,
    pub learned_backward: bool,
    pub teacher: TeacherShaping,
    pub novelty: NoveltyShaping,
    pub hidden: Vec<usize>,
    pub enumeration_cap: usize,
}

impl TrainConfig {
    /// Defaults tuned per environment family.
    pub fn for_env(env: EnvConfig, method: Method, seed: u64) -> Self {
        let mut cfg = TrainConfig {
            env: env.clone(),
            method,
            seed,
            iterations: 5_000,
            batch_size: 16,
            epsilon: 0.05,
            alpha: 0.3,
            beta: 0.25,
            lr_policy: 1e-2,
            lr_log_z: 1e-1,
            lr_end_factor: 0.01,
            weight_decay: 0.0,
            eval_every: 50,
            top_k: 200,
            learned_backward: false,
            teacher: TeacherShaping::default(),
            novelty: NoveltyShaping::default(),
            hidden: vec![128, 128],
            enumeration_cap: crate::graph::DEFAULT_ENUMERATION_CAP,
        };
        match env {
            EnvConfig::Grid { .. } => {
                cfg.iterations = 30_000;
            }
            EnvConfig::WalkRings { .. } | EnvConfig::WalkGaussians { .. } => {
                cfg.iterations = 4_000;
                cfg.epsilon = 0.1;
                cfg.alpha = 0.2;
                cfg.lr_policy = 5e-3;
                cfg.lr_log_z = 5e-2;
                cfg.lr_end_factor = 0.1;
                cfg.hidden = vec![64, 64];
            }
            EnvConfig::BitSeq { .. } => {
                cfg.iterations = 3_000;
                cfg.hidden = vec![128];
            }
            EnvConfig::SeqDesign { .. } => {
                cfg.iterations = 5_000;
                cfg.hidden = vec![128];
            }
            EnvConfig::Bag { .. } => {
                cfg.iterations = 1_500;
            }
            EnvConfig::Knapsack { .. } => {
                cfg.iterations = 256;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AceError::Config(msg));
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.method.two_samplers() && self.batch_size % 2 != 0 {
            return fail(format!(
                "method '{}' splits the batch between two samplers; batch_size {} must be even",
                self.method.id(),
                self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.alpha <= 0.0 {
            return fail(format!("alpha {} must be positive", self.alpha));
        }
        if self.beta <= 0.0 || self.beta > 1.0 {
            return fail(format!("beta {} outside (0, 1]", self.beta));
        }
        if self.lr_policy <= 0.0 || self.lr_log_z <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        if self.hidden.is_empty() {
            return fail("at least one hidden layer is required".into());
        }
        Ok(())
    }

    /// Applies one `path=value` override where `path` is dot-separated into
    /// the JSON form of the config (e.g. `lr_policy=0.02`, `env.side=8`,
    /// `teacher.eps=1e-6`).
    pub fn apply_override(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut cursor = &mut root;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                AceError::Config(format!("'{}' is not an object", segments[..i].join(".")))
            })?;
            cursor = obj.get_mut(*seg).ok_or_else(|| {
                AceError::Config(format!("unknown config field '{}'", segments[..=i].join(".")))
            })?;
        }
        *cursor = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root)
            .map_err(|e| AceError::Config(format!("override {path}={value} rejected: {e}")))?;
        Ok(())
    }
}
