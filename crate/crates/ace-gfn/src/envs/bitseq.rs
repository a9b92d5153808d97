//! Fixed-length bit sequences rewarded by edit distance to hidden modes.
//!
//! States are the bits appended so far; both append actions stay allowed
//! until the target length, where the sequence terminates. The log-reward is
//! `20 (1 - min_m lev(x, m) / len)` over a seeded set of hidden mode strings,
//! so exact modes score 20 and the antipode of an isolated mode scores 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::TOKEN_WINDOW;
use crate::graph::{State, StateGraph};

/// Levenshtein distance with the classic two-row dynamic program.
pub fn levenshtein(a: &[i32], b: &[i32]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone)]
pub struct BitSequence {
    pub len: usize,
    pub modes: Vec<Vec<i32>>,
    /// Samples within this edit distance of a mode count as hits.
    pub mode_tolerance: usize,
}

impl BitSequence {
    /// Draws `n_modes` distinct mode strings from a dedicated seeded stream.
    pub fn new(len: usize, n_modes: usize, mode_seed: u64) -> Self {
        assert!(n_modes <= 1usize << len.min(30), "more modes than strings");
        let mut rng = ChaCha8Rng::seed_from_u64(mode_seed);
        let mut modes: Vec<Vec<i32>> = Vec::with_capacity(n_modes);
        while modes.len() < n_modes {
            let candidate: Vec<i32> = (0..len).map(|_| rng.random_range(0..2)).collect();
            if !modes.contains(&candidate) {
                modes.push(candidate);
            }
        }
        Self::with_modes(len, modes)
    }

    /// Uses the given mode strings verbatim.
    pub fn with_modes(len: usize, modes: Vec<Vec<i32>>) -> Self {
        assert!(modes.iter().all(|m| m.len() == len));
        BitSequence {
            len,
            modes,
            mode_tolerance: len / 16,
        }
    }

    fn min_distance(&self, x: &State) -> usize {
        self.modes
            .iter()
            .map(|m| levenshtein(x, m))
            .min()
            .expect("at least one mode")
    }
}

impl StateGraph for BitSequence {
    fn initial_state(&self) -> State {
        Vec::new()
    }

    fn action_count(&self) -> usize {
        2
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        out.resize(2, s.len() < self.len);
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
        20.0 * (1.0 - self.min_distance(x) as f64 / self.len as f64)
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
        self.len <= 20
    }

    fn mode_id(&self, x: &State) -> Option<usize> {
        let (best, dist) = self
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| (i, levenshtein(x, m)))
            .min_by_key(|&(_, d)| d)?;
        (dist <= self.mode_tolerance).then_some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_known_values() {
        assert_eq!(levenshtein(&[], &[1, 0, 1]), 3);
        assert_eq!(levenshtein(&[1, 0, 1, 1, 0], &[1, 0, 1, 1, 0]), 0);
        assert_eq!(levenshtein(&[0, 0], &[1, 1]), 2);
        assert_eq!(levenshtein(&[1, 0, 1, 1], &[0, 0, 1, 1]), 1);
        // Deleting one symbol beats two substitutions.
        assert_eq!(levenshtein(&[0, 1, 0, 1], &[1, 0, 1]), 1);
    }

    #[test]
    fn reward_spans_zero_to_twenty() {
        let k = 8;
        let env = BitSequence::with_modes(k, vec![vec![0; k]]);
        assert_eq!(env.log_reward(&vec![0; k]), 20.0);
        assert_eq!(env.log_reward(&vec![1; k]), 0.0);
        let mut three_ones = vec![0; k];
        three_ones[1] = 1;
        three_ones[4] = 1;
        three_ones[6] = 1;
        assert!((env.log_reward(&three_ones) - 20.0 * (1.0 - 3.0 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn seeded_modes_are_distinct_and_reproducible() {
        let a = BitSequence::new(32, 60, 99);
        let b = BitSequence::new(32, 60, 99);
        assert_eq!(a.modes, b.modes);
        assert_eq!(a.modes.len(), 60);
        for (i, m) in a.modes.iter().enumerate() {
            assert_eq!(m.len(), 32);
            assert!(!a.modes[..i].contains(m));
        }
        let c = BitSequence::new(32, 60, 100);
        assert_ne!(a.modes, c.modes);
    }

    #[test]
    fn encoding_shows_last_window_tokens() {
        let env = BitSequence::new(32, 4, 1);
        let mut out = Vec::new();
        env.encode(&vec![1, 0, 1], &mut out);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 2.0, 1.0, 2.0, 3.0]);
        env.encode(&Vec::new(), &mut out);
        assert_eq!(out, vec![0.0; 6].iter().chain(&[0.0]).copied().collect::<Vec<_>>());
    }

    #[test]
    fn mode_hits_respect_the_tolerance() {
        let k = 32;
        let env = BitSequence::with_modes(k, vec![vec![0; k], vec![1; k]]);
        assert_eq!(env.mode_id(&vec![0; k]), Some(0));
        let mut near = vec![1; k];
        near[0] = 0;
        near[5] = 0;
        assert_eq!(env.mode_id(&near), Some(1));
        let mut far = vec![1; k];
        for i in 0..3 {
            far[i] = 0;
        }
        assert_eq!(env.mode_id(&far), None);
    }
}
