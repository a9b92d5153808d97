//! Bounded knapsack with pairwise item synergies.
//!
//! States are per-type multiplicities. An action adds one copy of a type; it
//! is feasible while the copy bound and the weight budget both hold, and a
//! state is terminal exactly when nothing fits any more, so the environment
//! has no stop action and terminals sit on the boundary of the feasible set.
//! The reward is the linear utility plus a symmetric quadratic synergy term,
//! all coefficients positive and drawn from a seeded instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{State, StateGraph};

/// Slack added to weight comparisons so that a load computed two ways never
/// flips feasibility.
const WEIGHT_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Knapsack {
    pub n_types: usize,
    pub max_copies: i32,
    pub budget: f64,
    /// Per-type utilities, in (0.1, 1).
    pub utils: Vec<f64>,
    /// Per-type weights, in (0.5, 2).
    pub weights: Vec<f64>,
    /// Symmetric synergy matrix, entries in (0, 0.05), row-major.
    pub synergy: Vec<f64>,
}

impl Knapsack {
    pub fn new(n_types: usize, max_copies: i32, budget: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utils: Vec<f64> = (0..n_types).map(|_| rng.random_range(0.1..1.0)).collect();
        let weights: Vec<f64> = (0..n_types).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut b = vec![0.0; n_types * n_types];
        for v in b.iter_mut() {
            *v = rng.random_range(0.0..0.05);
        }
        let mut synergy = vec![0.0; n_types * n_types];
        for i in 0..n_types {
            for j in 0..n_types {
                synergy[i * n_types + j] = 0.5 * (b[i * n_types + j] + b[j * n_types + i]);
            }
        }
        Knapsack {
            n_types,
            max_copies,
            budget,
            utils,
            weights,
            synergy,
        }
    }

    /// Uses explicit coefficients verbatim; `synergy` must be symmetric.
    pub fn with_instance(
        max_copies: i32,
        budget: f64,
        utils: Vec<f64>,
        weights: Vec<f64>,
        synergy: Vec<f64>,
    ) -> Self {
        let n = utils.len();
        assert_eq!(weights.len(), n);
        assert_eq!(synergy.len(), n * n);
        Knapsack {
            n_types: n,
            max_copies,
            budget,
            utils,
            weights,
            synergy,
        }
    }

    pub fn load(&self, s: &State) -> f64 {
        s.iter()
            .zip(&self.weights)
            .map(|(&m, &w)| m as f64 * w)
            .sum()
    }

    fn objective(&self, s: &State) -> f64 {
        let n = self.n_types;
        let mut v = 0.0;
        for i in 0..n {
            let mi = s[i] as f64;
            if mi == 0.0 {
                continue;
            }
            v += self.utils[i] * mi;
            for j in 0..n {
                let mj = s[j] as f64;
                if mj != 0.0 {
                    v += mi * self.synergy[i * n + j] * mj;
                }
            }
        }
        v
    }
}

impl StateGraph for Knapsack {
    fn initial_state(&self) -> State {
        vec![0; self.n_types]
    }

    fn action_count(&self) -> usize {
        self.n_types
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        let load = self.load(s);
        for i in 0..self.n_types {
            out.push(s[i] < self.max_copies && load + self.weights[i] <= self.budget + WEIGHT_EPS);
        }
    }

    fn step(&self, s: &State, action: usize) -> State {
        let mut n = s.clone();
        n[action] += 1;
        n
    }

    fn is_terminal(&self, s: &State) -> bool {
        let load = self.load(s);
        (0..self.n_types).all(|i| {
            s[i] >= self.max_copies || load + self.weights[i] > self.budget + WEIGHT_EPS
        })
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        // Removing a copy always yields a valid predecessor: the add that
        // restores `s` was feasible because `s` itself fits the budget.
        let mut parents = Vec::new();
        for i in 0..self.n_types {
            if s[i] > 0 {
                let mut p = s.clone();
                p[i] -= 1;
                parents.push((p, i));
            }
        }
        parents
    }

    fn parent_count(&self, s: &State) -> usize {
        s.iter().filter(|&&m| m > 0).count()
    }

    fn log_reward(&self, x: &State) -> f64 {
        self.objective(x).ln()
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        let cap = self.max_copies as f64;
        for &m in s.iter() {
            out.push(m as f64 / cap);
        }
        out.push(self.load(s) / self.budget);
    }

    fn feature_dim(&self) -> usize {
        self.n_types + 1
    }

    fn max_trajectory_length(&self) -> usize {
        let min_w = self
            .weights
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let by_budget = (self.budget / min_w).floor() as usize + 1;
        by_budget.min(self.n_types * self.max_copies as usize)
    }

    fn enumerable(&self) -> bool {
        (self.max_copies as f64 + 1.0).powi(self.n_types as i32)
            <= crate::graph::DEFAULT_ENUMERATION_CAP as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sample_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Knapsack {
        Knapsack::with_instance(
            2,
            3.0,
            vec![0.5, 0.8],
            vec![1.0, 1.5],
            vec![0.02, 0.01, 0.01, 0.04],
        )
    }

    #[test]
    fn objective_includes_synergies() {
        let env = tiny();
        // m = [2, 0]: 2*0.5 + 4*0.02 = 1.08.
        assert!((env.log_reward(&vec![2, 0]) - 1.08f64.ln()).abs() < 1e-12);
        // m = [1, 1]: 0.5 + 0.8 + 0.02 + 0.01 + 0.01 + 0.04 = 1.38.
        assert!((env.log_reward(&vec![1, 1]) - 1.38f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn terminal_means_nothing_fits() {
        let env = tiny();
        // Load 2.5 of budget 3: neither item (1.0, 1.5) fits any more, so the
        // state is terminal despite copies remaining.
        assert!(env.is_terminal(&vec![1, 1]));
        // Load 2.0 with the copy bound reached on item 0: also terminal,
        // because item 1 would need load 3.5.
        assert!(env.is_terminal(&vec![2, 0]));
        // Load 1.5: item 0 fits exactly (2.5) and item 1 exactly (3.0).
        assert!(!env.is_terminal(&vec![0, 1]));
        let mut mask = Vec::new();
        env.allowed_actions(&vec![0, 1], &mut mask);
        assert_eq!(mask, vec![true, true]);
    }

    #[test]
    fn parents_invert_steps_along_sampled_paths() {
        let env = Knapsack::new(16, 4, 12.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut uniform = |_: &crate::graph::State, out: &mut Vec<f64>| -> crate::error::Result<()> {
            out.clear();
            out.resize(16, (1.0f64 / 16.0).ln());
            Ok(())
        };
        for _ in 0..20 {
            let traj = sample_trajectory(&env, &mut uniform, 1.0, &mut rng).unwrap();
            assert!(env.is_terminal(traj.terminal()));
            for (k, &a) in traj.actions.iter().enumerate() {
                assert_eq!(env.step(&traj.states[k], a), traj.states[k + 1]);
            }
            for (p, a) in env.parent_actions(traj.terminal()) {
                assert_eq!(env.step(&p, a), *traj.terminal());
            }
            // Terminal rewards are finite and positive (objective > 0).
            assert!(traj.log_reward.is_finite());
        }
    }

    #[test]
    fn instances_are_seed_deterministic() {
        let a = Knapsack::new(128, 4, 60.0, 2);
        let b = Knapsack::new(128, 4, 60.0, 2);
        assert_eq!(a.utils, b.utils);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.synergy, b.synergy);
        for i in 0..a.n_types {
            for j in 0..a.n_types {
                let d = a.synergy[i * a.n_types + j] - a.synergy[j * a.n_types + i];
                assert_eq!(d, 0.0, "synergy must be exactly symmetric");
            }
        }
        assert!(a.utils.iter().all(|&u| (0.1..1.0).contains(&u)));
        assert!(a.weights.iter().all(|&w| (0.5..2.0).contains(&w)));
    }
}
