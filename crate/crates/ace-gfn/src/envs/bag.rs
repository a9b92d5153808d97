//! Fixed-capacity multisets over a small item alphabet.
//!
//! States are occurrence counts per item type; each action adds one item and
//! the bag terminates exactly at capacity. Item scores are one draw from a
//! Gaussian process over the item index line (exponential kernel), so
//! neighboring items have correlated scores and the reward landscape has a
//! few smooth high-value regions. The reward is the sum of `exp(score)` over
//! bag members, counted with multiplicity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::graph::{State, StateGraph};

/// Cholesky factor of a symmetric positive-definite matrix (row-major).
/// Returns the lower-triangular factor `L` with `L L^T = a`.
fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite");
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    l
}

#[derive(Debug, Clone)]
pub struct Bag {
    pub n_items: usize,
    pub capacity: usize,
    /// GP-drawn per-item scores; reward of a bag is
    /// `sum_e count_e * exp(scores[e])`.
    pub scores: Vec<f64>,
}

impl Bag {
    /// Draws item scores from a GP with kernel `exp(-|i - j| / 5)`.
    pub fn new(n_items: usize, capacity: usize, seed: u64) -> Self {
        assert!(n_items >= 1 && capacity >= 1);
        let n = n_items;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = (-((i as f64 - j as f64).abs()) / 5.0).exp();
            }
        }
        let l = cholesky(&cov, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let scores = (0..n)
            .map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum())
            .collect();
        Bag {
            n_items,
            capacity,
            scores,
        }
    }

    /// Uses the given scores verbatim.
    pub fn with_scores(capacity: usize, scores: Vec<f64>) -> Self {
        Bag {
            n_items: scores.len(),
            capacity,
            scores,
        }
    }

    fn size(&self, s: &State) -> usize {
        s.iter().map(|&c| c as usize).sum()
    }
}

impl StateGraph for Bag {
    fn initial_state(&self) -> State {
        vec![0; self.n_items]
    }

    fn action_count(&self) -> usize {
        self.n_items
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        out.resize(self.n_items, self.size(s) < self.capacity);
    }

    fn step(&self, s: &State, action: usize) -> State {
        let mut n = s.clone();
        n[action] += 1;
        n
    }

    fn is_terminal(&self, s: &State) -> bool {
        self.size(s) == self.capacity
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        let mut parents = Vec::new();
        for e in 0..self.n_items {
            if s[e] > 0 {
                let mut p = s.clone();
                p[e] -= 1;
                parents.push((p, e));
            }
        }
        parents
    }

    fn parent_count(&self, s: &State) -> usize {
        s.iter().filter(|&&c| c > 0).count()
    }

    fn log_reward(&self, x: &State) -> f64 {
        x.iter()
            .enumerate()
            .map(|(e, &c)| c as f64 * self.scores[e].exp())
            .sum::<f64>()
            .ln()
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        let cap = self.capacity as f64;
        for &c in s.iter() {
            out.push(c as f64 / cap);
        }
        out.push(self.size(s) as f64 / cap);
    }

    fn feature_dim(&self) -> usize {
        self.n_items + 1
    }

    fn max_trajectory_length(&self) -> usize {
        self.capacity
    }

    fn enumerable(&self) -> bool {
        // Number of states = C(n_items + capacity, capacity).
        let (n, s) = (self.n_items as f64, self.capacity as f64);
        let mut log_count = 0.0;
        for k in 1..=self.capacity {
            log_count += ((n + s - k as f64 + 1.0) / k as f64).ln();
        }
        log_count <= (crate::graph::DEFAULT_ENUMERATION_CAP as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::enumerate_states;

    #[test]
    fn cholesky_factor_reproduces_the_kernel() {
        let n = 20;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = (-((i as f64 - j as f64).abs()) / 5.0).exp();
            }
        }
        let l = cholesky(&cov, n);
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                for k in 0..n {
                    rec += l[i * n + k] * l[j * n + k];
                }
                assert!((rec - cov[i * n + j]).abs() < 1e-10);
            }
        }
        // Strictly lower triangular beyond the diagonal.
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(l[i * n + j], 0.0);
            }
        }
    }

    #[test]
    fn reward_counts_multiplicity() {
        let env = Bag::with_scores(3, vec![0.0, 1.0]);
        // Bag {0, 1, 1}: 1*e^0 + 2*e^1.
        let expect = (1.0 + 2.0 * 1.0f64.exp()).ln();
        assert!((env.log_reward(&vec![1, 2]) - expect).abs() < 1e-12);
    }

    #[test]
    fn terminates_exactly_at_capacity() {
        let env = Bag::new(4, 3, 11);
        let space = enumerate_states(&env, 100_000).unwrap();
        // C(4 + 3, 3) = 35 states.
        assert_eq!(space.states.len(), 35);
        for (i, s) in space.states.iter().enumerate() {
            let size: i32 = s.iter().sum();
            assert_eq!(space.terminal[i], size == 3);
            for (p, a) in env.parent_actions(s) {
                assert_eq!(env.step(&p, a), *s);
            }
            assert_eq!(env.parent_count(s), env.parent_actions(s).len());
        }
    }

    #[test]
    fn scores_are_seed_deterministic() {
        let a = Bag::new(20, 10, 3);
        let b = Bag::new(20, 10, 3);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.scores.len(), 20);
        assert!(a.scores.iter().all(|s| s.is_finite()));
        assert_ne!(a.scores, Bag::new(20, 10, 4).scores);
    }

    #[test]
    fn default_size_is_not_enumerable_but_small_is() {
        assert!(!Bag::new(20, 10, 1).enumerable());
        assert!(Bag::new(6, 4, 1).enumerable());
    }
}
