//! Explicitly tabulated DAG environments: small hand-built graphs and seeded
//! random DAGs used by oracles, property tests, and the proposition fixtures.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{AceError, Result};
use crate::graph::{State, StateGraph};

/// A DAG given by per-state child tables. States are integer ids; state `0`
/// is the root and features are one-hot over ids.
pub struct ExplicitDag {
    action_count: usize,
    /// Per state: `(action, child id)`, actions strictly ascending.
    children: Vec<Vec<(usize, usize)>>,
    terminal: Vec<bool>,
    /// Indexed by state id; meaningful only at terminal states.
    log_rewards: Vec<f64>,
    parents: Vec<Vec<(usize, usize)>>,
    max_len: usize,
}

impl ExplicitDag {
    /// Validates acyclicity, reachability from the root, unique actions per
    /// state, and finite rewards on terminals.
    pub fn new(
        children: Vec<Vec<(usize, usize)>>,
        log_rewards: Vec<f64>,
    ) -> Result<Self> {
        let n = children.len();
        if n == 0 || log_rewards.len() != n {
            return Err(AceError::Config(
                "explicit DAG needs matching children and reward tables".into(),
            ));
        }
        let mut action_count = 0;
        let mut parents = vec![Vec::new(); n];
        for (s, edges) in children.iter().enumerate() {
            let mut prev_action = None;
            for &(a, c) in edges {
                if c >= n {
                    return Err(AceError::Config(format!(
                        "edge from {s} references unknown state {c}"
                    )));
                }
                if prev_action.is_some_and(|p| a <= p) {
                    return Err(AceError::Config(format!(
                        "actions at state {s} must be strictly ascending"
                    )));
                }
                prev_action = Some(a);
                action_count = action_count.max(a + 1);
                parents[c].push((s, a));
            }
        }
        let terminal: Vec<bool> = children.iter().map(|e| e.is_empty()).collect();
        for (s, &t) in terminal.iter().enumerate() {
            if t && !log_rewards[s].is_finite() {
                return Err(AceError::Config(format!(
                    "terminal state {s} has non-finite log-reward"
                )));
            }
        }

        // Longest path from the root doubles as the cycle check: a DAG with n
        // states has paths of at most n-1 edges.
        let mut depth = vec![0usize; n];
        let mut reachable = vec![false; n];
        reachable[0] = true;
        let mut changed = true;
        let mut rounds = 0;
        while changed {
            changed = false;
            rounds += 1;
            if rounds > n + 1 {
                return Err(AceError::Config("graph contains a cycle".into()));
            }
            for s in 0..n {
                if !reachable[s] {
                    continue;
                }
                for &(_, c) in &children[s] {
                    if !reachable[c] || depth[c] < depth[s] + 1 {
                        reachable[c] = true;
                        depth[c] = depth[s] + 1;
                        changed = true;
                    }
                }
            }
        }
        if reachable.iter().any(|&r| !r) {
            return Err(AceError::Config(
                "explicit DAG has states unreachable from the root".into(),
            ));
        }
        let max_len = depth.iter().copied().max().unwrap_or(0);

        Ok(ExplicitDag {
            action_count,
            children,
            terminal,
            log_rewards,
            parents,
            max_len,
        })
    }

    pub fn n_states(&self) -> usize {
        self.children.len()
    }

    fn id(s: &State) -> usize {
        s[0] as usize
    }
}

impl StateGraph for ExplicitDag {
    fn initial_state(&self) -> State {
        vec![0]
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        out.resize(self.action_count, false);
        for &(a, _) in &self.children[Self::id(s)] {
            out[a] = true;
        }
    }

    fn step(&self, s: &State, action: usize) -> State {
        let id = Self::id(s);
        let &(_, child) = self.children[id]
            .iter()
            .find(|&&(a, _)| a == action)
            .expect("step on a masked action");
        vec![child as i32]
    }

    fn is_terminal(&self, s: &State) -> bool {
        self.terminal[Self::id(s)]
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        self.parents[Self::id(s)]
            .iter()
            .map(|&(p, a)| (vec![p as i32], a))
            .collect()
    }

    fn parent_count(&self, s: &State) -> usize {
        self.parents[Self::id(s)].len()
    }

    fn log_reward(&self, x: &State) -> f64 {
        self.log_rewards[Self::id(x)]
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.n_states(), 0.0);
        out[Self::id(s)] = 1.0;
    }

    fn feature_dim(&self) -> usize {
        self.n_states()
    }

    fn max_trajectory_length(&self) -> usize {
        self.max_len
    }

    fn enumerable(&self) -> bool {
        true
    }
}

/// A linear chain of `n_steps` single-action states ending in one terminal.
pub fn chain(n_steps: usize, log_reward: f64) -> ExplicitDag {
    let n = n_steps + 1;
    let mut children = Vec::with_capacity(n);
    for s in 0..n_steps {
        children.push(vec![(0, s + 1)]);
    }
    children.push(Vec::new());
    let mut log_rewards = vec![f64::NAN; n];
    log_rewards[n_steps] = log_reward;
    ExplicitDag::new(children, log_rewards).expect("chain is a valid DAG")
}

/// Root with `log_rewards.len()` terminal children, one action each.
pub fn star(log_rewards: &[f64]) -> ExplicitDag {
    let k = log_rewards.len();
    let mut children = vec![(0..k).map(|a| (a, a + 1)).collect::<Vec<_>>()];
    children.extend(std::iter::repeat_with(Vec::new).take(k));
    let mut table = vec![f64::NAN];
    table.extend_from_slice(log_rewards);
    ExplicitDag::new(children, table).expect("star is a valid DAG")
}

/// Two paths of different length joining at one terminal: root -> {a, b},
/// a -> t, b -> c -> t. Exercises non-tree parent structure.
pub fn diamond(log_reward: f64) -> ExplicitDag {
    let children = vec![
        vec![(0, 1), (1, 2)], // root
        vec![(0, 4)],         // a
        vec![(0, 3)],         // b
        vec![(0, 4)],         // c
        Vec::new(),           // t
    ];
    let log_rewards = vec![f64::NAN, f64::NAN, f64::NAN, f64::NAN, log_reward];
    ExplicitDag::new(children, log_rewards).expect("diamond is a valid DAG")
}

/// Seeded random layered DAG. Every state is reachable, every non-terminal
/// has at least one child, and terminals are exactly the last layer.
pub fn random_dag<R: Rng>(
    rng: &mut R,
    max_layers: usize,
    max_width: usize,
    max_out_degree: usize,
) -> ExplicitDag {
    let n_layers = rng.random_range(2..=max_layers.max(2));
    let mut layers = vec![vec![0usize]];
    let mut next_id = 1usize;
    for _ in 1..n_layers {
        let width = rng.random_range(1..=max_width.max(1));
        let layer: Vec<usize> = (0..width).map(|i| next_id + i).collect();
        next_id += width;
        layers.push(layer);
    }

    let n = next_id;
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for l in 0..n_layers - 1 {
        let below = &layers[l + 1];
        for &s in &layers[l] {
            let degree = rng.random_range(1..=max_out_degree.min(below.len()).max(1));
            let mut picks: Vec<usize> = Vec::new();
            while picks.len() < degree {
                let c = below[rng.random_range(0..below.len())];
                if !picks.contains(&c) {
                    picks.push(c);
                }
            }
            picks.sort_unstable();
            children[s] = picks.into_iter().enumerate().collect();
        }
        // Orphans in the layer below get a parent appended to a random state
        // above, keeping every state reachable.
        for &c in below {
            let has_parent = layers[l]
                .iter()
                .any(|&s| children[s].iter().any(|&(_, cc)| cc == c));
            if !has_parent {
                let s = layers[l][rng.random_range(0..layers[l].len())];
                let next_action = children[s].last().map_or(0, |&(a, _)| a + 1);
                children[s].push((next_action, c));
            }
        }
    }

    let normal = Normal::new(0.0, 1.5).expect("valid normal");
    let log_rewards: Vec<f64> = (0..n)
        .map(|s| {
            if children[s].is_empty() {
                normal.sample(rng)
            } else {
                f64::NAN
            }
        })
        .collect();

    ExplicitDag::new(children, log_rewards).expect("generated DAG is valid")
}
