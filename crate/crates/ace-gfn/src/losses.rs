//! Training losses and reward transforms.
//!
//! One sampler (the canonical one) regresses trajectory balance against the
//! true reward; a second sampler can be trained against the first with a
//! divergent variant that pushes probability mass toward terminals the first
//! sampler underestimates and actively off terminals it already covers. The
//! coupling runs through the induced reward (what the canonical sampler's
//! flow currently assigns to a terminal) and through an adaptive weight that
//! shifts the canonical update toward whichever batch the partition estimates
//! say is more trustworthy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, sigmoid};
use crate::error::{AceError, Result};
use crate::graph::{
    StateGraph, Trajectory, log_prob_backward, log_prob_backward_uniform, log_prob_forward,
    log_sum_exp,
};
use crate::policy::{BackwardEvaluator, MaskKind, PolicyEvaluator, PolicyModel, PolicyTape};

/// One sampler: a forward policy, an optional learned backward policy, and a
/// log-partition estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GFlowNet {
    pub forward: PolicyModel,
    pub backward: Option<PolicyModel>,
    pub log_z: f64,
}

impl GFlowNet {
    pub fn new(forward: PolicyModel) -> Self {
        GFlowNet {
            forward,
            backward: None,
            log_z: 0.0,
        }
    }

    pub fn with_learned_backward(mut self, backward: PolicyModel) -> Self {
        self.backward = Some(backward);
        self
    }

    /// Backward log-probability of `traj` given its terminal, as a plain
    /// value under the current parameters.
    pub fn log_pb_value(&self, env: &dyn StateGraph, traj: &Trajectory) -> Result<f64> {
        match &self.backward {
            None => Ok(log_prob_backward_uniform(env, traj)),
            Some(b) => {
                let mut eval = BackwardEvaluator::new(b, env);
                log_prob_backward(env, &mut eval, traj)
            }
        }
    }

    /// Pure-policy forward log-probability of `traj` as a plain value.
    pub fn log_pf_value(&self, env: &dyn StateGraph, traj: &Trajectory) -> Result<f64> {
        let mut eval = PolicyEvaluator::new(&self.forward, env);
        log_prob_forward(env, &mut eval, traj)
    }
}

/// The canonical sampler and its divergently trained counterpart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GFlowNetPair {
    pub canonical: GFlowNet,
    pub explorer: GFlowNet,
}

/// Tape parameter-group layout shared by every loss in this module: group 0
/// is the forward policy, group 1 is the one-element log-partition, group 2
/// (when present) is the learned backward policy.
pub const GROUP_FORWARD: usize = 0;
pub const GROUP_LOG_Z: usize = 1;
pub const GROUP_BACKWARD: usize = 2;

/// Builds per-trajectory loss nodes for one sampler on one tape, sharing
/// policy subgraphs across trajectories.
pub struct TrajectoryScorer<'m, 'e> {
    env: &'e dyn StateGraph,
    forward: PolicyTape<'m>,
    backward: Option<PolicyTape<'m>>,
    log_z_node: NodeId,
}

impl<'m, 'e> TrajectoryScorer<'m, 'e> {
    pub fn new(tape: &mut Tape, env: &'e dyn StateGraph, net: &'m GFlowNet) -> Self {
        let log_z_node = tape.param(GROUP_LOG_Z, 0, 1);
        TrajectoryScorer {
            env,
            forward: PolicyTape::new(&net.forward, GROUP_FORWARD, MaskKind::Forward),
            backward: net
                .backward
                .as_ref()
                .map(|b| PolicyTape::new(b, GROUP_BACKWARD, MaskKind::Parents)),
            log_z_node,
        }
    }

    /// `log Z + log p_F(traj) - log p_B(traj | x)` as (terms, bias) pieces.
    /// With a uniform backward policy the last term is a constant bias.
    fn balance_parts(
        &mut self,
        tape: &mut Tape,
        traj: &Trajectory,
    ) -> Result<(Vec<(f64, NodeId)>, f64)> {
        let lpf = self.forward.log_prob_node(tape, self.env, traj)?;
        let mut terms = vec![(1.0, self.log_z_node), (1.0, lpf)];
        let mut bias = 0.0;
        match &mut self.backward {
            None => bias -= log_prob_backward_uniform(self.env, traj),
            Some(bt) => {
                let lpb = bt.log_prob_node(tape, self.env, traj)?;
                terms.push((-1.0, lpb));
            }
        }
        Ok((terms, bias))
    }

    /// Pre-square balance residual against the target log-reward. Its plain
    /// value equals the induced log-reward minus the target, so allocation
    /// verdicts and teacher deltas read off the same node the loss squares.
    pub fn residual_node(
        &mut self,
        tape: &mut Tape,
        traj: &Trajectory,
        target_log_reward: f64,
    ) -> Result<NodeId> {
        let (terms, bias) = self.balance_parts(tape, traj)?;
        Ok(tape.lincomb(&terms, bias - target_log_reward))
    }

    /// Squared trajectory balance residual against the target log-reward
    /// (normally `traj.log_reward`; teachers substitute their own).
    pub fn tb_node(
        &mut self,
        tape: &mut Tape,
        traj: &Trajectory,
        target_log_reward: f64,
    ) -> Result<NodeId> {
        let residual = self.residual_node(tape, traj, target_log_reward)?;
        Ok(tape.square(residual))
    }

    /// Divergent residual: trajectories whose terminal the canonical sampler
    /// underestimates are pulled toward the tempered reward; trajectories it
    /// already covers are pushed away through a one-sided softplus.
    pub fn dtb_node(
        &mut self,
        tape: &mut Tape,
        traj: &Trajectory,
        beta: f64,
        verdict: AllocationVerdict,
    ) -> Result<NodeId> {
        let residual = self.residual_node(tape, traj, beta * traj.log_reward)?;
        match verdict {
            AllocationVerdict::Under => Ok(tape.square(residual)),
            AllocationVerdict::Over => {
                let sp = tape.softplus_node(residual);
                Ok(tape.square(sp))
            }
        }
    }
}

/// Mean squared trajectory balance over a batch; `target_log_rewards` runs
/// parallel to `batch`.
pub fn tb_batch_mean(
    tape: &mut Tape,
    scorer: &mut TrajectoryScorer,
    batch: &[Trajectory],
    target_log_rewards: &[f64],
) -> Result<NodeId> {
    if batch.is_empty() || batch.len() != target_log_rewards.len() {
        return Err(AceError::InvalidBatch);
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for (traj, &lr) in batch.iter().zip(target_log_rewards) {
        nodes.push(scorer.tb_node(tape, traj, lr)?);
    }
    Ok(tape.mean(&nodes))
}

/// Mean divergent loss over a batch with per-trajectory verdicts.
pub fn dtb_batch_mean(
    tape: &mut Tape,
    scorer: &mut TrajectoryScorer,
    batch: &[Trajectory],
    verdicts: &[AllocationVerdict],
    beta: f64,
) -> Result<NodeId> {
    if batch.is_empty() || batch.len() != verdicts.len() {
        return Err(AceError::InvalidBatch);
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for (traj, &v) in batch.iter().zip(verdicts) {
        nodes.push(scorer.dtb_node(tape, traj, beta, v)?);
    }
    Ok(tape.mean(&nodes))
}

/// Canonical update objective: the adaptively weighted sum of the on-policy
/// and exploration batch means, both against the true reward. The weight is
/// a plain number (no gradient flows through it). A side with zero weight may
/// be empty; a side that contributes must not be.
pub fn weighted_canonical_loss(
    tape: &mut Tape,
    scorer: &mut TrajectoryScorer,
    on_batch: &[Trajectory],
    exploration_batch: &[Trajectory],
    w: f64,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    if w > 0.0 {
        let lrs: Vec<f64> = on_batch.iter().map(|t| t.log_reward).collect();
        terms.push((w, tb_batch_mean(tape, scorer, on_batch, &lrs)?));
    }
    if w < 1.0 {
        let lrs: Vec<f64> = exploration_batch.iter().map(|t| t.log_reward).collect();
        terms.push((1.0 - w, tb_batch_mean(tape, scorer, exploration_batch, &lrs)?));
    }
    if terms.is_empty() {
        return Err(AceError::InvalidBatch);
    }
    Ok(tape.lincomb(&terms, 0.0))
}

/// Same objective, but the exploration batch's pre-square residuals come out
/// as plain values so verdicts and teacher deltas reuse this pass instead of
/// rescoring the batch. The exploration side is always evaluated (it must be
/// nonempty); its squared mean joins the loss only when its weight is
/// positive, leaving those nodes gradient-free at `w == 1`.
pub fn weighted_canonical_loss_with_residuals(
    tape: &mut Tape,
    scorer: &mut TrajectoryScorer,
    on_batch: &[Trajectory],
    exploration_batch: &[Trajectory],
    w: f64,
    exploration_residuals: &mut Vec<f64>,
) -> Result<NodeId> {
    if exploration_batch.is_empty() {
        return Err(AceError::InvalidBatch);
    }
    exploration_residuals.clear();
    let mut squares = Vec::with_capacity(exploration_batch.len());
    for traj in exploration_batch {
        let residual = scorer.residual_node(tape, traj, traj.log_reward)?;
        exploration_residuals.push(tape.scalar(residual));
        squares.push(tape.square(residual));
    }
    let mut terms = Vec::new();
    if w > 0.0 {
        let lrs: Vec<f64> = on_batch.iter().map(|t| t.log_reward).collect();
        terms.push((w, tb_batch_mean(tape, scorer, on_batch, &lrs)?));
    }
    if w < 1.0 {
        terms.push((1.0 - w, tape.mean(&squares)));
    }
    if terms.is_empty() {
        return Err(AceError::InvalidBatch);
    }
    Ok(tape.lincomb(&terms, 0.0))
}

/// How the canonical sampler's flow currently scores a terminal, measured
/// along one trajectory into it:
/// `log Z + log p_F(traj) - log p_B(traj | x)`, all plain values.
pub fn induced_log_reward(
    net: &GFlowNet,
    env: &dyn StateGraph,
    traj: &Trajectory,
) -> Result<f64> {
    Ok(net.log_z + net.log_pf_value(env, traj)? - net.log_pb_value(env, traj)?)
}

/// Whether the canonical sampler already allocates at least `alpha` of the
/// true reward to a terminal. Ties count as covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocationVerdict {
    Over,
    Under,
}

pub fn classify_allocation(
    induced_log_reward: f64,
    log_reward: f64,
    alpha: f64,
) -> AllocationVerdict {
    if induced_log_reward >= alpha.ln() + log_reward {
        AllocationVerdict::Over
    } else {
        AllocationVerdict::Under
    }
}

/// Adaptive weight on the on-policy batch: the canonical batch dominates
/// exactly when its partition estimate exceeds the explorer's.
pub fn mixing_weight(log_z: f64, log_z_div: f64) -> f64 {
    sigmoid(log_z - log_z_div)
}

/// Teacher reward shaping: amplifies terminals where the student's balance
/// residual `delta` is large, with an extra factor when the student
/// underestimates (`delta > 0`), floored for numerical safety and tilted
/// toward the true reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherShaping {
    pub eps: f64,
    pub underestimate_boost: f64,
    pub reward_tilt: f64,
}

impl Default for TeacherShaping {
    fn default() -> Self {
        TeacherShaping {
            eps: 1e-8,
            underestimate_boost: 1.0,
            reward_tilt: 1.0,
        }
    }
}

/// Student residual for teacher shaping:
/// `log R(x) + log p_B - log p_F - log Z`, positive when the student's flow
/// falls short of the reward.
pub fn student_residual(
    net: &GFlowNet,
    env: &dyn StateGraph,
    traj: &Trajectory,
) -> Result<f64> {
    Ok(traj.log_reward - induced_log_reward(net, env, traj)?)
}

pub fn teacher_log_reward(delta: f64, log_reward: f64, shaping: &TeacherShaping) -> f64 {
    let boost = 1.0 + shaping.underestimate_boost * f64::from(delta > 0.0);
    (shaping.eps + boost * delta * delta).ln() + shaping.reward_tilt * log_reward
}

/// Novelty-augmented reward `(R^b1 + i^b2)^b3` in log space; a zero intrinsic
/// term drops out exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyShaping {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for NoveltyShaping {
    fn default() -> Self {
        NoveltyShaping {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
        }
    }
}

pub fn novelty_log_reward(log_reward: f64, intrinsic: f64, shaping: &NoveltyShaping) -> f64 {
    debug_assert!(intrinsic >= 0.0);
    let parts = [shaping.beta1 * log_reward, shaping.beta2 * intrinsic.ln()];
    shaping.beta3 * log_sum_exp(&parts)
}

/// Random network distillation: a trained predictor chases a frozen random
/// target; the prediction error is the novelty signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rnd {
    pub predictor: PolicyModel,
    pub target: PolicyModel,
    pub out_dim: usize,
}

impl Rnd {
    /// Builds predictor and target with the same architecture but independent
    /// draws from `rng`; the target is never updated afterwards.
    pub fn new(
        encoder: crate::policy::Encoder,
        hidden: Vec<usize>,
        out_dim: usize,
        activation: crate::policy::Activation,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let predictor = crate::policy::MlpPolicy::new(
            encoder.clone(),
            hidden.clone(),
            out_dim,
            activation,
            rng,
        );
        let target = crate::policy::MlpPolicy::new(encoder, hidden, out_dim, activation, rng);
        Rnd {
            predictor: PolicyModel::Mlp(predictor),
            target: PolicyModel::Mlp(target),
            out_dim,
        }
    }

    /// Squared prediction error on one state: the per-state novelty signal.
    pub fn intrinsic(&self, env: &dyn StateGraph, x: &crate::graph::State) -> f64 {
        let (pred, tgt) = (self.raw(&self.predictor, env, x), self.raw(&self.target, env, x));
        pred.iter()
            .zip(&tgt)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
    }

    fn raw(&self, model: &PolicyModel, env: &dyn StateGraph, x: &crate::graph::State) -> Vec<f64> {
        let PolicyModel::Mlp(m) = model else {
            unreachable!("distillation nets are MLPs by construction")
        };
        let mut feat = Vec::new();
        env.encode(x, &mut feat);
        let (mut a, mut b, mut out) = (Vec::new(), Vec::new(), Vec::new());
        m.forward_raw(&feat, None, &mut a, &mut b, &mut out);
        out
    }

    /// One gradient step of the predictor toward the target on a batch of
    /// states; returns the pre-step mean intrinsic error.
    pub fn update(
        &mut self,
        env: &dyn StateGraph,
        xs: &[crate::graph::State],
        opt: &mut crate::optim::AdamW,
        lr_factor: f64,
    ) -> Result<f64> {
        if xs.is_empty() {
            return Err(AceError::InvalidBatch);
        }
        let targets: Vec<Vec<f64>> = xs.iter().map(|x| self.raw(&self.target, env, x)).collect();
        let (loss, grads) = crate::autodiff::loss_and_grad(
            vec![self.predictor.params()],
            |tape| {
                let mut pt = PolicyTape::new(&self.predictor, 0, MaskKind::Forward);
                let mut per_x = Vec::with_capacity(xs.len());
                for (x, tgt) in xs.iter().zip(&targets) {
                    let pred = pt.raw_logits_node(tape, env, x);
                    let tn = tape.constant(tgt);
                    per_x.push(tape.sum_sq_diff(pred, tn));
                }
                Ok(tape.mean(&per_x))
            },
        )?;
        opt.apply(self.predictor.params_mut(), &grads[0], lr_factor)?;
        Ok(loss)
    }

    /// Same update, but each state's pre-step intrinsic error comes out
    /// aligned with `xs`, read off the forwards the step differentiates.
    /// Repeat visits share one subgraph and weight the mean by multiplicity,
    /// so the objective stays the plain mean over `xs`.
    pub fn update_with_intrinsics(
        &mut self,
        env: &dyn StateGraph,
        xs: &[crate::graph::State],
        opt: &mut crate::optim::AdamW,
        lr_factor: f64,
        intrinsics_out: &mut Vec<f64>,
    ) -> Result<f64> {
        if xs.is_empty() {
            return Err(AceError::InvalidBatch);
        }
        let mut index = std::collections::HashMap::new();
        let mut unique: Vec<&crate::graph::State> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut slot = Vec::with_capacity(xs.len());
        for x in xs {
            let i = *index.entry(x).or_insert_with(|| {
                unique.push(x);
                counts.push(0.0);
                unique.len() - 1
            });
            counts[i] += 1.0;
            slot.push(i);
        }
        let PolicyModel::Mlp(target_mlp) = &self.target else {
            unreachable!("distillation nets are MLPs by construction")
        };
        let (mut feat, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
        let targets: Vec<Vec<f64>> = unique
            .iter()
            .map(|x| {
                env.encode(x, &mut feat);
                let mut out = Vec::new();
                target_mlp.forward_raw(&feat, None, &mut a, &mut b, &mut out);
                out
            })
            .collect();
        let mut errors = vec![0.0; unique.len()];
        let (loss, grads) = crate::autodiff::loss_and_grad(
            vec![self.predictor.params()],
            |tape| {
                let mut pt = PolicyTape::new(&self.predictor, 0, MaskKind::Forward);
                let n = xs.len() as f64;
                let mut terms = Vec::with_capacity(unique.len());
                for (i, (x, tgt)) in unique.iter().zip(&targets).enumerate() {
                    let pred = pt.raw_logits_node(tape, env, x);
                    let tn = tape.constant(tgt);
                    let d = tape.sum_sq_diff(pred, tn);
                    errors[i] = tape.scalar(d);
                    terms.push((counts[i] / n, d));
                }
                Ok(tape.lincomb(&terms, 0.0))
            },
        )?;
        opt.apply(self.predictor.params_mut(), &grads[0], lr_factor)?;
        intrinsics_out.clear();
        intrinsics_out.extend(slot.iter().map(|&i| errors[i]));
        Ok(loss)
    }
}
