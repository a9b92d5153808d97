//! Fixed-length sequences over a general alphabet with an additive
//! position-value reward.
//!
//! Each position `k` carries a seeded weight `u_k` and each token `v` a seeded
//! value `c_v`, both standard normal; the log-reward of a finished sequence is
//! `sum_k u_k c_{x_k}`. Rewards are multiplicative across positions, so the
//! target distribution factorizes but the per-position preferences conflict
//! in sign, which spreads probability over many sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::envs::TOKEN_WINDOW;
use crate::graph::{State, StateGraph};

#[derive(Debug, Clone)]
pub struct SequenceDesign {
    pub len: usize,
    pub vocab: usize,
    /// Per-position weights, length `len`.
    pub position_weights: Vec<f64>,
    /// Per-token values, length `vocab`.
    pub token_values: Vec<f64>,
}

impl SequenceDesign {
    pub fn new(len: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let position_weights = (0..len)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let token_values = (0..vocab)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        SequenceDesign {
            len,
            vocab,
            position_weights,
            token_values,
        }
    }
}

impl StateGraph for SequenceDesign {
    fn initial_state(&self) -> State {
        Vec::new()
    }

    fn action_count(&self) -> usize {
        self.vocab
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        out.resize(self.vocab, s.len() < self.len);
    }

    fn step(&self, s: &State, action: usize) -> State {
        let mut n = s.clone();
        n.push(action as i32);
        n
    }

    fn is_terminal(&self, s: &State) -> bool {
        s.len() == self.len
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        if s.is_empty() {
            Vec::new()
        } else {
            vec![(s[..s.len() - 1].to_vec(), s[s.len() - 1] as usize)]
        }
    }

    fn parent_count(&self, s: &State) -> usize {
        usize::from(!s.is_empty())
    }

    fn log_reward(&self, x: &State) -> f64 {
        x.iter()
            .enumerate()
            .map(|(k, &t)| self.position_weights[k] * self.token_values[t as usize])
            .sum()
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        for k in 0..TOKEN_WINDOW {
            let back = TOKEN_WINDOW - k;
            let id = if s.len() >= back {
                s[s.len() - back] + 1
            } else {
                0
            };
            out.push(id as f64);
        }
        out.push(s.len() as f64);
    }

    fn feature_dim(&self) -> usize {
        TOKEN_WINDOW + 1
    }

    fn max_trajectory_length(&self) -> usize {
        self.len
    }

    fn enumerable(&self) -> bool {
        (self.vocab as f64).powi(self.len as i32)
            <= crate::graph::DEFAULT_ENUMERATION_CAP as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_the_weighted_token_sum() {
        let mut env = SequenceDesign::new(3, 2, 5);
        env.position_weights = vec![1.0, -2.0, 0.5];
        env.token_values = vec![3.0, -1.0];
        // x = [0, 1, 1]: 1*3 + (-2)(-1) + 0.5*(-1) = 4.5.
        assert!((env.log_reward(&vec![0, 1, 1]) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn instances_are_seed_deterministic() {
        let a = SequenceDesign::new(24, 6, 7);
        let b = SequenceDesign::new(24, 6, 7);
        assert_eq!(a.position_weights, b.position_weights);
        assert_eq!(a.token_values, b.token_values);
        let c = SequenceDesign::new(24, 6, 8);
        assert_ne!(a.position_weights, c.position_weights);
    }

    #[test]
    fn enumerability_tracks_the_state_count() {
        assert!(SequenceDesign::new(8, 4, 1).enumerable());
        assert!(!SequenceDesign::new(24, 6, 1).enumerable());
    }
}
