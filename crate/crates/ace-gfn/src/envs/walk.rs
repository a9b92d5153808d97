//! Fixed-horizon lazy random walk on a bounded square.
//!
//! States are `[x, y, t]` with positions in `[-half_width, half_width]` and a
//! 1-based clock; every trajectory lasts exactly `2 * half_width` states, so
//! terminals are the reachable positions at the final tick. The five actions
//! are the four unit moves plus staying put. Reward is a smoothed density over
//! positions (concentric rings or a circle of Gaussians) on top of a floor.

use crate::graph::{State, StateGraph};
use crate::policy::FourierTimeFeatures;

/// Unit moves indexed by action; the last entry is the lazy action.
const MOVES: [(i32, i32); 5] = [(1, 0), (-1, 0), (0, 1), (0, -1), (0, 0)];

#[derive(Debug, Clone, PartialEq)]
pub enum WalkReward {
    /// Concentric rings at the given radii.
    Rings { radii: Vec<f64> },
    /// Equally spaced Gaussian bumps on a circle of the given radius.
    Gaussians { count: usize, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct LazyRandomWalk {
    pub half_width: i32,
    /// Number of states per trajectory; the clock runs `1..=horizon`.
    pub horizon: i32,
    pub reward: WalkReward,
    pub sigma: f64,
    pub floor: f64,
    time_features: FourierTimeFeatures,
}

impl LazyRandomWalk {
    pub fn new(half_width: usize, reward: WalkReward) -> Self {
        assert!(half_width >= 1);
        LazyRandomWalk {
            half_width: half_width as i32,
            horizon: 2 * half_width as i32,
            reward,
            sigma: 1.0,
            floor: 1e-4,
            time_features: FourierTimeFeatures {
                n_freq: 8,
                include_tau: true,
            },
        }
    }

    /// Two rings at 20% and 80% of the half-width.
    pub fn rings(half_width: usize) -> Self {
        let m = half_width as f64;
        Self::new(
            half_width,
            WalkReward::Rings {
                radii: vec![0.2 * m, 0.8 * m],
            },
        )
    }

    /// Eight Gaussian bumps on a circle at 80% of the half-width.
    pub fn eight_gaussians(half_width: usize) -> Self {
        Self::new(
            half_width,
            WalkReward::Gaussians {
                count: 8,
                radius: 0.8 * half_width as f64,
            },
        )
    }

    /// Smoothed positional density before the floor is added.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let two_s2 = 2.0 * self.sigma * self.sigma;
        match &self.reward {
            WalkReward::Rings { radii } => {
                let d = (x * x + y * y).sqrt();
                radii
                    .iter()
                    .map(|&r| (-(d - r) * (d - r) / two_s2).exp())
                    .sum()
            }
            WalkReward::Gaussians { count, radius } => (0..*count)
                .map(|k| {
                    let angle = std::f64::consts::TAU * k as f64 / *count as f64;
                    let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
                    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    (-d2 / two_s2).exp()
                })
                .sum(),
        }
    }

    /// A position is reachable at clock `t` iff the walk can have covered it:
    /// within bounds and within `t - 1` steps of the origin.
    fn reachable(&self, x: i32, y: i32, t: i32) -> bool {
        x.abs() <= self.half_width
            && y.abs() <= self.half_width
            && x.abs() + y.abs() <= t - 1
            && (1..=self.horizon).contains(&t)
    }
}

impl StateGraph for LazyRandomWalk {
    fn initial_state(&self) -> State {
        vec![0, 0, 1]
    }

    fn action_count(&self) -> usize {
        MOVES.len()
    }

    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
        out.clear();
        let (x, y, t) = (s[0], s[1], s[2]);
        for (dx, dy) in MOVES {
            out.push(
                t < self.horizon
                    && (x + dx).abs() <= self.half_width
                    && (y + dy).abs() <= self.half_width,
            );
        }
    }

    fn step(&self, s: &State, action: usize) -> State {
        let (dx, dy) = MOVES[action];
        vec![s[0] + dx, s[1] + dy, s[2] + 1]
    }

    fn is_terminal(&self, s: &State) -> bool {
        s[2] == self.horizon
    }

    fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
        let (x, y, t) = (s[0], s[1], s[2]);
        let mut parents = Vec::new();
        for (a, (dx, dy)) in MOVES.iter().enumerate() {
            let (px, py) = (x - dx, y - dy);
            if self.reachable(px, py, t - 1) {
                parents.push((vec![px, py, t - 1], a));
            }
        }
        parents
    }

    fn log_reward(&self, s: &State) -> f64 {
        (self.density(s[0] as f64, s[1] as f64) + self.floor).ln()
    }

    fn encode(&self, s: &State, out: &mut Vec<f64>) {
        out.clear();
        let m = self.half_width as f64;
        out.push(s[0] as f64 / m);
        out.push(s[1] as f64 / m);
        let tau = (s[2] - 1) as f64 / (self.horizon - 1) as f64;
        self.time_features.write(tau, out);
    }

    fn feature_dim(&self) -> usize {
        2 + self.time_features.dim()
    }

    fn max_trajectory_length(&self) -> usize {
        (self.horizon - 1) as usize
    }

    fn enumerable(&self) -> bool {
        let w = (2 * self.half_width + 1) as f64;
        self.horizon as f64 * w * w <= crate::graph::DEFAULT_ENUMERATION_CAP as f64
    }

    fn mode_id(&self, x: &State) -> Option<usize> {
        // A terminal hits a mode when its pre-floor density is at least 1/2,
        // i.e. within sigma * sqrt(2 ln 2) of a ring or bump center.
        if self.density(x[0] as f64, x[1] as f64) < 0.5 {
            return None;
        }
        let (px, py) = (x[0] as f64, x[1] as f64);
        match &self.reward {
            WalkReward::Rings { radii } => {
                let d = (px * px + py * py).sqrt();
                radii
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        (a.1 - d).abs().total_cmp(&(b.1 - d).abs())
                    })
                    .map(|(i, _)| i)
            }
            WalkReward::Gaussians { count, radius } => (0..*count)
                .min_by_key(|&k| {
                    let angle = std::f64::consts::TAU * k as f64 / *count as f64;
                    let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
                    (((px - cx) * (px - cx) + (py - cy) * (py - cy)) * 1e6) as i64
                })
                .map(|k| k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::enumerate_states;

    #[test]
    fn horizon_and_reachability() {
        let env = LazyRandomWalk::rings(4);
        assert_eq!(env.horizon, 8);
        let space = enumerate_states(&env, 1_000_000).unwrap();
        for (i, s) in space.states.iter().enumerate() {
            assert_eq!(space.terminal[i], s[2] == 8);
            assert!(s[0].abs() + s[1].abs() <= s[2] - 1);
        }
        // Corners need |x| + |y| = 8 moves but only 7 happen.
        assert!(!space.states.iter().any(|s| s[0].abs() + s[1].abs() == 8));
    }

    #[test]
    fn parents_invert_steps_and_respect_reachability() {
        let env = LazyRandomWalk::rings(3);
        let space = enumerate_states(&env, 1_000_000).unwrap();
        let lists = space.parent_lists();
        for (i, s) in space.states.iter().enumerate() {
            let parents = env.parent_actions(s);
            for (p, a) in &parents {
                assert_eq!(env.step(p, *a), *s);
            }
            // The geometric parent list must match the edges actually
            // discovered by enumeration, otherwise backward probabilities
            // would normalize over unreachable states.
            assert_eq!(parents.len(), lists[i].len());
        }
    }

    #[test]
    fn ring_reward_values() {
        let env = LazyRandomWalk::rings(18);
        // On the outer ring: distance exactly 14.4 has density close to 1.
        let d = env.density(14.4, 0.0);
        assert!(d > 1.0 - 1e-6 && d < 1.1);
        // Far from both rings the floor dominates.
        let far = env.log_reward(&vec![9, 0, 36]);
        let rho = env.density(9.0, 0.0);
        assert!((far - (rho + 1e-4).ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_centers_are_modes() {
        let env = LazyRandomWalk::eight_gaussians(18);
        // Nearest lattice point to the first center (14.4, 0).
        assert_eq!(env.mode_id(&vec![14, 0, 36]), Some(0));
        assert_eq!(env.mode_id(&vec![0, 0, 36]), None);
        // Opposite center.
        assert_eq!(env.mode_id(&vec![-14, 0, 36]), Some(4));
    }

    #[test]
    fn encoding_has_the_documented_width() {
        let env = LazyRandomWalk::rings(18);
        assert_eq!(env.feature_dim(), 19);
        let mut out = Vec::new();
        env.encode(&vec![18, -18, 36], &mut out);
        assert_eq!(out.len(), 19);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], -1.0);
        // tau = 1 at the final tick.
        assert_eq!(out[2], 1.0);
    }
}
