//! State-graph abstraction over environments, trajectory sampling, and the
//! exact dynamic-programming marginal used by oracles and evaluation.
//!
//! Environments expose a rooted DAG whose sinks are terminal states. States
//! are canonical `Vec<i32>` vectors; the vector itself is the dedup key, so
//! environments must keep the representation canonical (e.g. sorted multisets).

use std::collections::HashMap;
use std::collections::VecDeque;
use std::hash::{BuildHasherDefault, Hasher};

use rand::Rng;

use crate::error::{AceError, Result};

/// Canonical state representation; environments define the layout.
pub type State = Vec<i32>;

/// Multiply-rotate hasher for state keys. The default hasher's per-lookup
/// setup dominates memo probes in the sampling loop; states are short integer
/// vectors, so a cheap mix keeps collisions rare, and the fixed seed keeps
/// probe order identical across runs.
#[derive(Clone, Copy, Default)]
pub struct StateMixHasher(u64);

impl Hasher for StateMixHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        // Integer-slice keys arrive as one raw byte view; fold it word-wise.
        let mut chunks = bytes.chunks_exact(8);
        for c in &mut chunks {
            self.write_u64(u64::from_le_bytes(c.try_into().unwrap()));
        }
        let rem = chunks.remainder();
        if !rem.is_empty() {
            let mut buf = [0u8; 8];
            buf[..rem.len()].copy_from_slice(rem);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }

    fn write_u32(&mut self, v: u32) {
        self.write_u64(v as u64);
    }

    fn write_i32(&mut self, v: i32) {
        self.write_u64(v as u32 as u64);
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
}

/// State-keyed hash map with the cheap fixed-seed hasher. Callers that
/// iterate must impose their own order; these maps are for point lookups.
pub type StateMap<V> = HashMap<State, V, BuildHasherDefault<StateMixHasher>>;

/// Sentinel added to masked logits before log-softmax. `exp` of anything this
/// small underflows to exactly 0.0, so masked actions carry no probability.
pub const MASK_SENTINEL: f64 = -1e30;

/// Renders a state for error messages, e.g. `3;0;1`.
pub fn state_label(s: &State) -> String {
    s.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// A rooted DAG of states with per-state action masks and terminal rewards.
///
/// Invariants environments must uphold:
/// - `step` on an allowed action moves strictly "forward" (the graph is acyclic);
/// - every non-terminal state allows at least one action;
/// - `parent_actions(step(s, a))` contains `(s, a)` and nothing invalid;
/// - at most one action leads from a given parent to a given child;
/// - `log_reward` is finite on every reachable terminal state.
pub trait StateGraph {
    /// Root of the DAG.
    fn initial_state(&self) -> State;
    /// Size of the action space (masks and logits use this length).
    fn action_count(&self) -> usize;
    /// Writes the action mask for non-terminal `s` into `out`.
    fn allowed_actions(&self, s: &State, out: &mut Vec<bool>);
    /// Applies an allowed action.
    fn step(&self, s: &State, action: usize) -> State;
    fn is_terminal(&self, s: &State) -> bool;
    /// All `(parent, action)` pairs with `step(parent, action) == s`.
    fn parent_actions(&self, s: &State) -> Vec<(State, usize)>;
    /// Number of parents; environments override this when it is cheaper than
    /// materializing `parent_actions`.
    fn parent_count(&self, s: &State) -> usize {
        self.parent_actions(s).len()
    }
    /// Log-reward of a terminal state.
    fn log_reward(&self, x: &State) -> f64;
    /// Writes the policy feature vector for `s` into `out`.
    fn encode(&self, s: &State, out: &mut Vec<f64>);
    /// Length of the vector written by `encode`.
    fn feature_dim(&self) -> usize;
    /// Upper bound on the number of actions in any trajectory.
    fn max_trajectory_length(&self) -> usize;
    /// Whether exhaustive state enumeration is intended to be feasible.
    fn enumerable(&self) -> bool;
    /// Stable id of the reward mode containing terminal `x`, for
    /// mode-discovery metrics. `None` when `x` is off-mode or the environment
    /// has no canonical mode structure.
    fn mode_id(&self, _x: &State) -> Option<usize> {
        None
    }
}

/// One rooted path from the initial state to a terminal state.
///
/// `log_pf` is the log-probability under the distribution that *sampled* the
/// trajectory (the epsilon-mixed policy when sampled with `epsilon > 0`); the
/// pure-policy value is recomputable via [`log_prob_forward`]. `log_pb` caches
/// the uniform-backward log-probability; callers with a learned backward
/// policy recompute it via [`log_prob_backward`]. `sample_backward` does not
/// compute `log_pf` and leaves it at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<usize>,
    pub log_pf: f64,
    pub log_pb: f64,
    pub log_reward: f64,
}

impl Trajectory {
    /// Terminal state of the trajectory.
    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Produces masked log-probabilities over the full action space for a
/// non-terminal state. Implementations may cache per-state results.
pub trait ForwardScorer {
    fn log_probs(&mut self, s: &State, out: &mut Vec<f64>) -> Result<()>;
}

impl<F> ForwardScorer for F
where
    F: FnMut(&State, &mut Vec<f64>) -> Result<()>,
{
    fn log_probs(&mut self, s: &State, out: &mut Vec<f64>) -> Result<()> {
        self(s, out)
    }
}

/// Scores parents of a state; log-probabilities align with the parent list.
pub trait BackwardScorer {
    fn log_probs(
        &mut self,
        child: &State,
        parents: &[(State, usize)],
        out: &mut Vec<f64>,
    ) -> Result<()>;
}

impl<F> BackwardScorer for F
where
    F: FnMut(&State, &[(State, usize)], &mut Vec<f64>) -> Result<()>,
{
    fn log_probs(
        &mut self,
        child: &State,
        parents: &[(State, usize)],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        self(child, parents, out)
    }
}

/// Uniform-over-parents backward policy, the default everywhere.
pub struct UniformBackward;

impl BackwardScorer for UniformBackward {
    fn log_probs(
        &mut self,
        _child: &State,
        parents: &[(State, usize)],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if parents.is_empty() {
            return Err(AceError::EmptyActionSet);
        }
        let lp = -(parents.len() as f64).ln();
        out.clear();
        out.resize(parents.len(), lp);
        Ok(())
    }
}

/// Draws one trajectory from the epsilon-mixed forward policy.
///
/// With probability `epsilon` per step the action is uniform over allowed
/// actions; `log_pf` records the log-probability under the mixture. `log_pb`
/// caches the uniform-backward log-probability of the sampled path.
pub fn sample_trajectory<R: Rng>(
    env: &dyn StateGraph,
    scorer: &mut dyn ForwardScorer,
    epsilon: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut states = vec![env.initial_state()];
    let mut actions = Vec::new();
    let mut log_pf = 0.0;
    let mut log_pb = 0.0;
    let mut mask = Vec::new();
    let mut lp = Vec::new();
    let max_len = env.max_trajectory_length();

    loop {
        let s = states.last().unwrap();
        if env.is_terminal(s) {
            break;
        }
        if actions.len() > max_len {
            return Err(AceError::MalformedEnvironment {
                state: state_label(s),
            });
        }
        env.allowed_actions(s, &mut mask);
        let n_allowed = mask.iter().filter(|&&m| m).count();
        if n_allowed == 0 {
            return Err(AceError::MalformedEnvironment {
                state: state_label(s),
            });
        }
        scorer.log_probs(s, &mut lp)?;
        debug_assert_eq!(lp.len(), env.action_count());

        let action = if epsilon > 0.0 {
            let uniform = epsilon / n_allowed as f64;
            let u: f64 = rng.random::<f64>();
            let mut cum = 0.0;
            let mut chosen = usize::MAX;
            let mut chosen_p = 0.0;
            let mut last_allowed = usize::MAX;
            for a in 0..mask.len() {
                if !mask[a] {
                    continue;
                }
                last_allowed = a;
                let p = (1.0 - epsilon) * lp[a].exp() + uniform;
                cum += p;
                if chosen == usize::MAX && u < cum {
                    chosen = a;
                    chosen_p = p;
                }
            }
            if chosen == usize::MAX {
                // Cumulative rounding left u just above the total; take the
                // last allowed action.
                chosen = last_allowed;
                chosen_p = (1.0 - epsilon) * lp[chosen].exp() + uniform;
            }
            log_pf += chosen_p.ln();
            chosen
        } else {
            let u: f64 = rng.random::<f64>();
            let mut cum = 0.0;
            let mut chosen = usize::MAX;
            let mut last_allowed = usize::MAX;
            for a in 0..mask.len() {
                if !mask[a] {
                    continue;
                }
                last_allowed = a;
                cum += lp[a].exp();
                if chosen == usize::MAX && u < cum {
                    chosen = a;
                }
            }
            if chosen == usize::MAX {
                chosen = last_allowed;
            }
            log_pf += lp[chosen];
            chosen
        };

        let next = env.step(s, action);
        log_pb -= (env.parent_count(&next) as f64).ln();
        states.push(next);
        actions.push(action);
    }

    let log_reward = env.log_reward(states.last().unwrap());
    Ok(Trajectory {
        states,
        actions,
        log_pf,
        log_pb,
        log_reward,
    })
}

/// Walks from a terminal state back to the root under a backward policy.
///
/// The returned trajectory is oriented forward (root first); `log_pb` is its
/// sampling log-probability and `log_pf` is left at 0 for callers to fill.
pub fn sample_backward<R: Rng>(
    env: &dyn StateGraph,
    x: &State,
    scorer: &mut dyn BackwardScorer,
    rng: &mut R,
) -> Result<Trajectory> {
    let root = env.initial_state();
    let mut rev_states = vec![x.clone()];
    let mut rev_actions = Vec::new();
    let mut log_pb = 0.0;
    let mut lp = Vec::new();
    let max_len = env.max_trajectory_length();

    loop {
        let s = rev_states.last().unwrap();
        if *s == root {
            break;
        }
        if rev_actions.len() > max_len {
            return Err(AceError::UnreachableState {
                state: state_label(x),
            });
        }
        let parents = env.parent_actions(s);
        if parents.is_empty() {
            return Err(AceError::UnreachableState {
                state: state_label(s),
            });
        }
        scorer.log_probs(s, &parents, &mut lp)?;
        debug_assert_eq!(lp.len(), parents.len());
        let u: f64 = rng.random::<f64>();
        let mut cum = 0.0;
        let mut chosen = parents.len() - 1;
        for (i, l) in lp.iter().enumerate() {
            cum += l.exp();
            if u < cum {
                chosen = i;
                break;
            }
        }
        log_pb += lp[chosen];
        let (parent, action) = parents.into_iter().nth(chosen).unwrap();
        rev_states.push(parent);
        rev_actions.push(action);
    }

    rev_states.reverse();
    rev_actions.reverse();
    let log_reward = env.log_reward(x);
    Ok(Trajectory {
        states: rev_states,
        actions: rev_actions,
        log_pf: 0.0,
        log_pb,
        log_reward,
    })
}

/// Log-probability of `traj` under the pure forward policy (no epsilon mix).
pub fn log_prob_forward(
    env: &dyn StateGraph,
    scorer: &mut dyn ForwardScorer,
    traj: &Trajectory,
) -> Result<f64> {
    let mut mask = Vec::new();
    let mut lp = Vec::new();
    let mut total = 0.0;
    for (step, (s, &a)) in traj.states.iter().zip(traj.actions.iter()).enumerate() {
        env.allowed_actions(s, &mut mask);
        if a >= mask.len() || !mask[a] {
            return Err(AceError::InvalidTrajectory { step, action: a });
        }
        scorer.log_probs(s, &mut lp)?;
        total += lp[a];
    }
    Ok(total)
}

/// Log-probability of `traj` under a backward policy, i.e. of reproducing the
/// path parent-by-parent starting from its terminal state.
pub fn log_prob_backward(
    env: &dyn StateGraph,
    scorer: &mut dyn BackwardScorer,
    traj: &Trajectory,
) -> Result<f64> {
    let mut lp = Vec::new();
    let mut total = 0.0;
    for (step, window) in traj.states.windows(2).enumerate().rev() {
        let parent = &window[0];
        let child = &window[1];
        let action = traj.actions[step];
        let parents = env.parent_actions(child);
        let idx = parents
            .iter()
            .position(|(p, a)| *a == action && p == parent)
            .ok_or(AceError::InvalidTrajectory { step, action })?;
        scorer.log_probs(child, &parents, &mut lp)?;
        total += lp[idx];
    }
    Ok(total)
}

/// Uniform-backward log-probability of a trajectory.
pub fn log_prob_backward_uniform(env: &dyn StateGraph, traj: &Trajectory) -> f64 {
    traj.states[1..]
        .iter()
        .map(|s| -(env.parent_count(s) as f64).ln())
        .sum()
}

/// Fully enumerated state space of an environment, in BFS discovery order.
///
/// Discovery order is deterministic (queue order, actions ascending), which
/// keeps every downstream float reduction byte-reproducible.
pub struct StateSpace {
    pub states: Vec<State>,
    pub index: StateMap<usize>,
    /// Outgoing `(action, child index)` edges per state, actions ascending.
    pub edges: Vec<Vec<(usize, usize)>>,
    pub terminal: Vec<bool>,
}

impl StateSpace {
    /// Indices of terminal states in discovery order.
    pub fn terminal_indices(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|&i| self.terminal[i]).collect()
    }

    /// Incoming `(parent index, action)` lists per state.
    pub fn parent_lists(&self) -> Vec<Vec<(usize, usize)>> {
        let mut parents = vec![Vec::new(); self.states.len()];
        for (s, edges) in self.edges.iter().enumerate() {
            for &(a, c) in edges {
                parents[c].push((s, a));
            }
        }
        parents
    }

    /// State indices in a topological order (Kahn's algorithm).
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.states.len();
        let mut indegree = vec![0usize; n];
        for edges in &self.edges {
            for &(_, c) in edges {
                indegree[c] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for &(_, c) in &self.edges[s] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        debug_assert_eq!(order.len(), n, "state graph contains a cycle");
        order
    }
}

/// Default cap on exhaustive state discovery.
pub const DEFAULT_ENUMERATION_CAP: usize = 5_000_000;

/// Discovers every state reachable from the root, failing beyond `cap`.
pub fn enumerate_states(env: &dyn StateGraph, cap: usize) -> Result<StateSpace> {
    let root = env.initial_state();
    let mut states = vec![root.clone()];
    let mut index = StateMap::default();
    index.insert(root, 0usize);
    let mut edges: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut terminal = Vec::new();
    let mut mask = Vec::new();
    let mut head = 0usize;

    while head < states.len() {
        let s = states[head].clone();
        let is_term = env.is_terminal(&s);
        terminal.push(is_term);
        let mut out_edges = Vec::new();
        if !is_term {
            env.allowed_actions(&s, &mut mask);
            if !mask.iter().any(|&m| m) {
                return Err(AceError::MalformedEnvironment {
                    state: state_label(&s),
                });
            }
            for a in 0..mask.len() {
                if !mask[a] {
                    continue;
                }
                let child = env.step(&s, a);
                let child_id = match index.get(&child) {
                    Some(&id) => id,
                    None => {
                        let id = states.len();
                        if id >= cap {
                            return Err(AceError::EnumerationTooLarge { cap });
                        }
                        index.insert(child.clone(), id);
                        states.push(child);
                        id
                    }
                };
                out_edges.push((a, child_id));
            }
        }
        edges.push(out_edges);
        head += 1;
    }

    Ok(StateSpace {
        states,
        index,
        edges,
        terminal,
    })
}

/// A distribution over terminal states, aligned with a stable state order.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub states: Vec<State>,
    pub probs: Vec<f64>,
    index: StateMap<usize>,
}

impl Distribution {
    pub fn new(states: Vec<State>, probs: Vec<f64>) -> Self {
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Distribution {
            states,
            probs,
            index,
        }
    }

    pub fn prob(&self, s: &State) -> f64 {
        self.index.get(s).map_or(0.0, |&i| self.probs[i])
    }

    pub fn contains(&self, s: &State) -> bool {
        self.index.contains_key(s)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Exact terminal marginal of the epsilon-mixed policy by flow propagation
/// over the enumerated DAG.
///
/// `scorer` provides pure-policy masked log-probabilities; the epsilon mix
/// with the uniform-over-allowed policy is applied here. Runs in one pass over
/// a topological order, so cost is one policy evaluation per non-terminal
/// state.
pub fn exact_marginal(
    env: &dyn StateGraph,
    scorer: &mut dyn ForwardScorer,
    epsilon: f64,
    cap: usize,
) -> Result<Distribution> {
    let space = enumerate_states(env, cap)?;
    let order = space.topological_order();
    let n = space.states.len();
    let mut flow = vec![0.0f64; n];
    flow[0] = 1.0;
    let mut lp = Vec::new();

    for &si in &order {
        if space.terminal[si] || flow[si] == 0.0 {
            continue;
        }
        let s = &space.states[si];
        scorer.log_probs(s, &mut lp)?;
        let f = flow[si];
        let n_allowed = space.edges[si].len() as f64;
        for &(a, child) in &space.edges[si] {
            let p = if epsilon > 0.0 {
                (1.0 - epsilon) * lp[a].exp() + epsilon / n_allowed
            } else {
                lp[a].exp()
            };
            flow[child] += f * p;
        }
    }

    let mut states = Vec::new();
    let mut probs = Vec::new();
    for i in 0..n {
        if space.terminal[i] {
            states.push(space.states[i].clone());
            probs.push(flow[i]);
        }
    }
    Ok(Distribution::new(states, probs))
}

/// Stable log-sum-exp over a slice; returns `-inf` on an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Table of every terminal state with its log-reward and the exact partition.
pub struct TerminalTable {
    pub states: Vec<State>,
    pub log_rewards: Vec<f64>,
    pub index: StateMap<usize>,
    /// `log sum_x R(x)` over the table.
    pub log_partition: f64,
}

impl TerminalTable {
    pub fn new(states: Vec<State>, log_rewards: Vec<f64>) -> Self {
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let log_partition = log_sum_exp(&log_rewards);
        TerminalTable {
            states,
            log_rewards,
            index,
            log_partition,
        }
    }

    /// Enumerates an environment's terminals in discovery order.
    pub fn from_env(env: &dyn StateGraph, cap: usize) -> Result<Self> {
        let space = enumerate_states(env, cap)?;
        let mut states = Vec::new();
        let mut log_rewards = Vec::new();
        for i in 0..space.states.len() {
            if space.terminal[i] {
                states.push(space.states[i].clone());
                log_rewards.push(env.log_reward(&space.states[i]));
            }
        }
        Ok(TerminalTable::new(states, log_rewards))
    }

    /// The normalized target distribution `pi(x) = R(x) / Z`.
    pub fn target(&self) -> Distribution {
        let probs = self
            .log_rewards
            .iter()
            .map(|&lr| (lr - self.log_partition).exp())
            .collect();
        Distribution::new(self.states.clone(), probs)
    }

    /// Target under a tempered reward `R(x)^beta`.
    pub fn target_tempered(&self, beta: f64) -> Distribution {
        let scaled: Vec<f64> = self.log_rewards.iter().map(|&lr| beta * lr).collect();
        let z = log_sum_exp(&scaled);
        let probs = scaled.iter().map(|&lr| (lr - z).exp()).collect();
        Distribution::new(self.states.clone(), probs)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::explicit::{chain, diamond, random_dag, star};
    use crate::policy::{PolicyEvaluator, PolicyModel, TabularPolicy};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_model(env: &dyn StateGraph) -> PolicyModel {
        PolicyModel::Tabular(TabularPolicy::uniform(env, 10_000).unwrap())
    }

    #[test]
    fn chain_enumeration_and_topology() {
        let env = chain(4, 0.0);
        let space = enumerate_states(&env, 10_000).unwrap();
        assert_eq!(space.states.len(), 5);
        assert_eq!(space.terminal_indices(), vec![4]);
        let order = space.topological_order();
        let pos: Vec<usize> = {
            let mut p = vec![0; order.len()];
            for (rank, &si) in order.iter().enumerate() {
                p[si] = rank;
            }
            p
        };
        for (si, edges) in space.edges.iter().enumerate() {
            for &(_, child) in edges {
                assert!(pos[si] < pos[child], "parent after child in topo order");
            }
        }
        assert!(matches!(
            enumerate_states(&env, 3),
            Err(AceError::EnumerationTooLarge { cap: 3 })
        ));
    }

    #[test]
    fn star_uniform_marginal_is_uniform() {
        let env = star(&[0.0, 0.0, 0.0, 0.0]);
        let model = uniform_model(&env);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let dist = exact_marginal(&env, &mut eval, 0.0, 10_000).unwrap();
        assert_eq!(dist.len(), 4);
        for &p in &dist.probs {
            assert!((p - 0.25).abs() < 1e-14);
        }
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn star_softmax_marginal_matches_hand_values() {
        let env = star(&[0.0, 0.0, 0.0]);
        let mut tab = TabularPolicy::uniform(&env, 10_000).unwrap();
        tab.logits_mut(&vec![0]).copy_from_slice(&[0.0, 1.0, 2.0]);
        let model = PolicyModel::Tabular(tab);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let dist = exact_marginal(&env, &mut eval, 0.0, 10_000).unwrap();
        let z: f64 = (0..3).map(|i| (i as f64).exp()).sum();
        for i in 0..3 {
            let expect = (i as f64).exp() / z;
            assert!((dist.prob(&vec![i as i32 + 1]) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn diamond_paths_have_equal_probability_under_uniform() {
        let env = diamond(0.0);
        let model = uniform_model(&env);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let dist = exact_marginal(&env, &mut eval, 0.0, 10_000).unwrap();
        assert_eq!(dist.len(), 1);
        assert!((dist.total_mass() - 1.0).abs() < 1e-14);

        let short = Trajectory {
            states: vec![vec![0], vec![1], vec![4]],
            actions: vec![0, 0],
            log_pf: 0.0,
            log_pb: 0.0,
            log_reward: 0.0,
        };
        let lp = log_prob_forward(&env, &mut eval, &short).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn epsilon_mix_is_applied_inside_the_marginal() {
        let env = star(&[0.0, 0.0]);
        let mut tab = TabularPolicy::uniform(&env, 10_000).unwrap();
        tab.logits_mut(&vec![0]).copy_from_slice(&[0.0, 5.0]);
        let model = PolicyModel::Tabular(tab);
        let p1 = 1.0 / (1.0 + 5.0f64.exp());
        let eps = 0.5;
        let expect = (1.0 - eps) * p1 + eps / 2.0;
        let mut eval = PolicyEvaluator::new(&model, &env);
        let dist = exact_marginal(&env, &mut eval, eps, 10_000).unwrap();
        assert!((dist.prob(&vec![1]) - expect).abs() < 1e-14);
    }

    #[test]
    fn sampled_frequencies_match_the_exact_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let env = star(&[0.0; 7]);
        let tab = TabularPolicy::random(&env, 10_000, 1.0, &mut rng).unwrap();
        let model = PolicyModel::Tabular(tab);
        let eps = 0.2;
        let mut eval = PolicyEvaluator::new(&model, &env);
        let dist = exact_marginal(&env, &mut eval, eps, 10_000).unwrap();

        let n = 20_000usize;
        let mut counts = vec![0u64; dist.len()];
        let mut eval = PolicyEvaluator::new(&model, &env);
        for _ in 0..n {
            let traj = sample_trajectory(&env, &mut eval, eps, &mut rng).unwrap();
            let idx = dist
                .states
                .iter()
                .position(|s| s == traj.terminal())
                .unwrap();
            counts[idx] += 1;
        }

        // Chi-square goodness of fit at the 0.999 quantile via the
        // Wilson-Hilferty cube-root approximation.
        let mut q = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            let e = dist.probs[i] * n as f64;
            assert!(e > 5.0, "expected count too small for chi-square");
            q += (c as f64 - e).powi(2) / e;
        }
        let dof = (dist.len() - 1) as f64;
        let z = ((q / dof).powf(1.0 / 3.0) - (1.0 - 2.0 / (9.0 * dof)))
            / (2.0 / (9.0 * dof)).sqrt();
        assert!(z < 3.0902, "chi-square statistic {q} too large (z = {z})");
    }

    #[test]
    fn sampled_log_probs_are_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let env = random_dag(&mut rng, 5, 4, 3);
        let tab = TabularPolicy::random(&env, 10_000, 1.5, &mut rng).unwrap();
        let model = PolicyModel::Tabular(tab);
        let eps = 0.3;
        for _ in 0..50 {
            let mut eval = PolicyEvaluator::new(&model, &env);
            let traj = sample_trajectory(&env, &mut eval, eps, &mut rng).unwrap();

            let mut mask = Vec::new();
            let mut lp = Vec::new();
            let mut expect_pf = 0.0;
            for (s, &a) in traj.states.iter().zip(traj.actions.iter()) {
                env.allowed_actions(s, &mut mask);
                let n_allowed = mask.iter().filter(|&&m| m).count() as f64;
                eval.log_probs(s, &mut lp).unwrap();
                expect_pf += ((1.0 - eps) * lp[a].exp() + eps / n_allowed).ln();
            }
            assert!((traj.log_pf - expect_pf).abs() < 1e-12);
            assert!((traj.log_pb - log_prob_backward_uniform(&env, &traj)).abs() < 1e-12);
            assert!(env.is_terminal(traj.terminal()));
            assert_eq!(traj.log_reward, env.log_reward(traj.terminal()));
        }
    }

    #[test]
    fn backward_samples_are_valid_forward_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let env = random_dag(&mut rng, 5, 4, 3);
        let space = enumerate_states(&env, 10_000).unwrap();
        for &ti in &space.terminal_indices() {
            let x = &space.states[ti];
            let traj = sample_backward(&env, x, &mut UniformBackward, &mut rng).unwrap();
            assert_eq!(traj.states[0], env.initial_state());
            assert_eq!(traj.terminal(), x);
            for (k, &a) in traj.actions.iter().enumerate() {
                assert_eq!(env.step(&traj.states[k], a), traj.states[k + 1]);
            }
            assert!((traj.log_pb - log_prob_backward_uniform(&env, &traj)).abs() < 1e-12);
            assert_eq!(traj.log_pf, 0.0);
        }
    }

    #[test]
    fn forward_log_prob_rejects_illegal_actions() {
        let env = chain(3, 0.0);
        let model = uniform_model(&env);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let bad = Trajectory {
            states: vec![vec![0], vec![1]],
            actions: vec![4],
            log_pf: 0.0,
            log_pb: 0.0,
            log_reward: 0.0,
        };
        assert!(matches!(
            log_prob_forward(&env, &mut eval, &bad),
            Err(AceError::InvalidTrajectory { step: 0, action: 4 })
        ));
    }

    #[test]
    fn terminal_table_partition_and_tempered_target() {
        let env = star(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]);
        let table = TerminalTable::from_env(&env, 10_000).unwrap();
        assert_eq!(table.len(), 3);
        assert!((table.log_partition - 6.0f64.ln()).abs() < 1e-12);

        let target = table.target();
        assert!((target.prob(&vec![1]) - 1.0 / 6.0).abs() < 1e-12);
        assert!((target.prob(&vec![3]) - 3.0 / 6.0).abs() < 1e-12);

        let sqrt_z = 1.0 + 2.0f64.sqrt() + 3.0f64.sqrt();
        let tempered = table.target_tempered(0.5);
        assert!((tempered.prob(&vec![2]) - 2.0f64.sqrt() / sqrt_z).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2.0f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[-1e30, -1e30]).is_finite(), true);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_dag_trajectories_roundtrip(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env = random_dag(&mut rng, 4, 4, 3);
            let tab = TabularPolicy::random(&env, 10_000, 1.0, &mut rng).unwrap();
            let model = PolicyModel::Tabular(tab);
            let mut eval = PolicyEvaluator::new(&model, &env);
            let traj = sample_trajectory(&env, &mut eval, 0.1, &mut rng).unwrap();
            prop_assert!(env.is_terminal(traj.terminal()));
            for (k, &a) in traj.actions.iter().enumerate() {
                prop_assert_eq!(env.step(&traj.states[k], a), traj.states[k + 1].clone());
            }
            let back = sample_backward(&env, traj.terminal(), &mut UniformBackward, &mut rng).unwrap();
            prop_assert_eq!(back.states[0].clone(), env.initial_state());
            prop_assert_eq!(back.terminal(), traj.terminal());
        }
    }
}
