//! Hypergrid with monotone moves and an explicit stop action.
//!
//! States are `[c_1, ..., c_d, done]` with coordinates in `0..=side`. Each
//! action increments one coordinate; the final action stops, which is the only
//! way to terminate. Reward is a small floor plus a bonus on a band of cells
//! per coordinate, giving well-separated modes.

use crate::graph::{State, StateGraph};

#[derive(Debug, Clone)]
pub struct GridWorld {
    pub dim: usize,
    pub side: usize,
    /// Coordinates whose band indicator is 1, precomputed once.
    mode_coords: Vec<bool>,
    reward_floor: f64,
    bonus: f64,
}

impl GridWorld {
    pub fn new(dim: usize, side: usize) -> Self {
        assert!(dim >= 1 && side >= 1);
        // Band indicator per coordinate value: 6 < |5 c / side - 10| < 8.
        let mode_coords = (0..=side)
            .map(|c| {
                let y = (5.0 * c as f64 / side as f64 - 10.0).abs();
                y > 6.0 && y < 8.0
            })
            .collect();
        GridWorld {
            dim,
            side,
            mode_coords,
            reward_floor: 1e-3,
            bonus: 3.0,
        }
    }

    fn in_mode(&self, s: &State) -> bool {
        s[..self.dim]
            .iter()
            .all(|&c| self.mode_coords[c as usize])
    }

    /// Coordinate values whose band indicator is set.
    pub fn mode_values(&self) -> Vec<usize> {
        self.mode_coords
            .iter()
            .enumerate()
            .filter_map(|(c, &m)| if m { Some(c) } else { None })
            .collect()
    }
}

impl StateGraph for GridWorld {
    fn initial_state(&self) -> State {
        vec![0; self.dim + 1]
    }

    fn action_count(&self) -> usize {
        self.dim + 1
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        let done = s[self.dim] == 1;
        for i in 0..self.dim {
            out.push(!done && (s[i] as usize) < self.side);
        }
        out.push(!done);
    }

    fn step(&self, s: &State, action: usize) -> State {
        let mut n = s.clone();
        if action == self.dim {
            n[self.dim] = 1;
        } else {
            n[action] += 1;
        }
        n
    }

    fn is_terminal(&self, s: &State) -> bool {
        s[self.dim] == 1
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        let mut parents = Vec::new();
        if s[self.dim] == 1 {
            let mut p = s.clone();
            p[self.dim] = 0;
            parents.push((p, self.dim));
            return parents;
        }
        for i in 0..self.dim {
            if s[i] > 0 {
                let mut p = s.clone();
                p[i] -= 1;
                parents.push((p, i));
            }
        }
        parents
    }

    fn log_reward(&self, s: &State) -> f64 {
        let r = if self.in_mode(s) {
            self.reward_floor + self.bonus
        } else {
            self.reward_floor
        };
        r.ln()
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.dim * (self.side + 1), 0.0);
        for i in 0..self.dim {
            out[i * (self.side + 1) + s[i] as usize] = 1.0;
        }
        for i in 0..self.dim {
            out.push(s[i] as f64 / self.side as f64);
        }
    }

    fn feature_dim(&self) -> usize {
        self.dim * (self.side + 1) + self.dim
    }

    fn max_trajectory_length(&self) -> usize {
        self.dim * self.side + 1
    }

    fn enumerable(&self) -> bool {
        let states = 2.0 * ((self.side + 1) as f64).powi(self.dim as i32);
        states <= crate::graph::DEFAULT_ENUMERATION_CAP as f64
    }

    fn mode_id(&self, x: &State) -> Option<usize> {
        if !self.in_mode(x) {
            return None;
        }
        let values = self.mode_values();
        let mut id = 0usize;
        for i in 0..self.dim {
            let rank = values.iter().position(|&v| v == x[i] as usize)?;
            id = id * values.len() + rank;
        }
        Some(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{TerminalTable, enumerate_states};

    #[test]
    fn known_rewards_on_the_large_grid() {
        let env = GridWorld::new(2, 16);
        assert!((env.log_reward(&vec![0, 0, 1]) - 0.001f64.ln()).abs() < 1e-12);
        assert!((env.log_reward(&vec![9, 9, 1]) - 3.001f64.ln()).abs() < 1e-12);
        assert_eq!(env.mode_values(), vec![7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn small_grid_modes_and_partition() {
        let env = GridWorld::new(2, 4);
        assert_eq!(env.mode_values(), vec![2, 3]);
        let table = TerminalTable::from_env(&env, 100_000).unwrap();
        assert_eq!(table.len(), 25);
        let z: f64 = table.log_rewards.iter().map(|lr| lr.exp()).sum();
        assert!((z - 12.025).abs() < 1e-9);
    }

    #[test]
    fn termination_only_via_stop() {
        let env = GridWorld::new(2, 4);
        let space = enumerate_states(&env, 100_000).unwrap();
        for (i, s) in space.states.iter().enumerate() {
            assert_eq!(space.terminal[i], s[2] == 1);
            if !space.terminal[i] {
                let mut mask = Vec::new();
                env.allowed_actions(s, &mut mask);
                assert!(mask[2], "stop must always be allowed before done");
            }
        }
        // Every coordinate cell is reachable and terminable: (side+1)^2 each.
        assert_eq!(space.states.len(), 50);
    }

    #[test]
    fn parents_invert_steps() {
        let env = GridWorld::new(3, 5);
        let space = enumerate_states(&env, 1_000_000).unwrap();
        for s in &space.states {
            for (p, a) in env.parent_actions(s) {
                assert_eq!(env.step(&p, a), *s);
                let mut mask = Vec::new();
                env.allowed_actions(&p, &mut mask);
                assert!(mask[a]);
            }
        }
    }

    #[test]
    fn mode_ids_are_distinct_and_cover_modes() {
        let env = GridWorld::new(2, 16);
        let mut seen = std::collections::HashSet::new();
        for a in 7..=12 {
            for b in 7..=12 {
                let id = env.mode_id(&vec![a, b, 1]).unwrap();
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), 36);
        assert_eq!(env.mode_id(&vec![0, 9, 1]), None);
    }
}
