//! Training loops. All four methods consume the same trajectory budget per
//! iteration (`batch_size` draws) so their metric curves are comparable at
//! equal sample cost; two-sampler methods split the batch evenly between the
//! canonical sampler and its companion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::loss_and_grad;
use crate::config::{EnvConfig, Method, TrainConfig};
use crate::envs::TOKEN_WINDOW;
use crate::error::{AceError, Result};
use crate::graph::{
    exact_marginal, sample_trajectory, Distribution, StateGraph, TerminalTable, Trajectory,
};
use crate::losses::{
    classify_allocation, dtb_batch_mean, mixing_weight, novelty_log_reward, teacher_log_reward,
    tb_batch_mean, weighted_canonical_loss, weighted_canonical_loss_with_residuals,
    AllocationVerdict, GFlowNet, Rnd,
    TrajectoryScorer, GROUP_BACKWARD, GROUP_FORWARD, GROUP_LOG_Z,
};
use crate::metrics::{topk_unique_mean, tv_distance, MetricRecord, TerminalHistory};
use crate::optim::{AdamW, LinearLrSchedule};
use crate::policy::{Activation, Encoder, MlpPolicy, PolicyEvaluator, PolicyModel};

/// Distillation head width for the novelty bonus.
const NOVELTY_OUT_DIM: usize = 32;

/// Encoder and activation for an environment family. Sequence environments
/// get the token-window encoder; spatial walks use plain ReLU; the remaining
/// vector environments use a leaky slope so dead inputs keep a gradient.
fn encoder_for(env_cfg: &EnvConfig, env: &dyn StateGraph) -> (Encoder, Activation) {
    match env_cfg.vocab() {
        Some(vocab) => (
            Encoder::TokenWindow {
                vocab,
                window: TOKEN_WINDOW,
                embed_dim: 64,
                pos_dim: 16,
            },
            Activation::Relu,
        ),
        None => {
            let activation = match env_cfg {
                EnvConfig::WalkRings { .. } | EnvConfig::WalkGaussians { .. } => Activation::Relu,
                _ => Activation::LeakyRelu { slope: 0.01 },
            };
            (
                Encoder::Identity {
                    dim: env.feature_dim(),
                },
                activation,
            )
        }
    }
}

pub fn build_policy_model(
    config: &TrainConfig,
    env: &dyn StateGraph,
    rng: &mut ChaCha8Rng,
) -> PolicyModel {
    let (encoder, activation) = encoder_for(&config.env, env);
    PolicyModel::Mlp(MlpPolicy::new(
        encoder,
        config.hidden.clone(),
        env.action_count(),
        activation,
        rng,
    ))
}

pub fn build_gfn(config: &TrainConfig, env: &dyn StateGraph, rng: &mut ChaCha8Rng) -> GFlowNet {
    let mut net = GFlowNet::new(build_policy_model(config, env, rng));
    if config.learned_backward {
        net = net.with_learned_backward(build_policy_model(config, env, rng));
    }
    net
}

fn build_rnd(config: &TrainConfig, env: &dyn StateGraph, rng: &mut ChaCha8Rng) -> Rnd {
    let (encoder, activation) = encoder_for(&config.env, env);
    Rnd::new(
        encoder,
        config.hidden.clone(),
        NOVELTY_OUT_DIM,
        activation,
        rng,
    )
}

/// Per-sampler optimizer state: one AdamW per parameter vector, with the
/// log-partition on its own (typically larger) learning rate and never
/// weight-decayed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetOptimizers {
    pub policy: AdamW,
    pub log_z: AdamW,
    pub backward: Option<AdamW>,
}

impl NetOptimizers {
    pub fn new(config: &TrainConfig, net: &GFlowNet) -> Self {
        NetOptimizers {
            policy: AdamW::new(net.forward.n_params(), config.lr_policy)
                .with_weight_decay(config.weight_decay),
            log_z: AdamW::new(1, config.lr_log_z),
            backward: net.backward.as_ref().map(|b| {
                AdamW::new(b.n_params(), config.lr_policy).with_weight_decay(config.weight_decay)
            }),
        }
    }
}

/// Tape parameter groups of one sampler, in the layout the loss module
/// expects (forward, log-partition, optional backward).
fn net_groups(net: &GFlowNet) -> Vec<&[f64]> {
    let mut groups = vec![net.forward.params(), std::slice::from_ref(&net.log_z)];
    if let Some(b) = &net.backward {
        groups.push(b.params());
    }
    groups
}

fn apply_step(
    net: &mut GFlowNet,
    opts: &mut NetOptimizers,
    grads: &[Vec<f64>],
    lr_factor: f64,
) -> Result<()> {
    opts.policy
        .apply(net.forward.params_mut(), &grads[GROUP_FORWARD], lr_factor)?;
    let mut z = [net.log_z];
    opts.log_z.apply(&mut z, &grads[GROUP_LOG_Z], lr_factor)?;
    net.log_z = z[0];
    if let Some(b) = net.backward.as_mut() {
        let opt = opts
            .backward
            .as_mut()
            .expect("backward optimizer exists whenever the net is learned-backward");
        opt.apply(b.params_mut(), &grads[GROUP_BACKWARD], lr_factor)?;
    }
    Ok(())
}

fn sample_batch(
    env: &dyn StateGraph,
    net: &GFlowNet,
    n: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    let mut eval = PolicyEvaluator::new(&net.forward, env);
    (0..n)
        .map(|_| sample_trajectory(env, &mut eval, epsilon, rng))
        .collect()
}

pub struct TrainOutput {
    pub config: TrainConfig,
    pub records: Vec<MetricRecord>,
    pub net: GFlowNet,
    /// Second sampler: divergent, teacher, or novelty-shaped depending on
    /// the method; absent for the single-sampler baseline.
    pub companion: Option<GFlowNet>,
    pub history: TerminalHistory,
    pub canonical_opt: NetOptimizers,
    pub companion_opt: Option<NetOptimizers>,
    pub rnd: Option<Rnd>,
    pub rnd_opt: Option<AdamW>,
    /// Generator state after the final iteration.
    pub rng: ChaCha8Rng,
    pub iterations_done: usize,
}

impl TrainOutput {
    pub fn final_record(&self) -> &MetricRecord {
        self.records
            .last()
            .expect("training always emits a final record")
    }
}

/// One iteration's loss values and reporting extras.
struct IterationStats {
    loss_canonical: f64,
    loss_exploration: Option<f64>,
    w: Option<f64>,
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let env_box = config.env.build();
    let env = env_box.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut canonical = build_gfn(config, env, &mut rng);
    let mut companion = if config.method.two_samplers() {
        Some(build_gfn(config, env, &mut rng))
    } else {
        None
    };
    let mut rnd = match config.method {
        Method::Sa => Some(build_rnd(config, env, &mut rng)),
        _ => None,
    };

    let mut canonical_opt = NetOptimizers::new(config, &canonical);
    let mut companion_opt = companion.as_ref().map(|n| NetOptimizers::new(config, n));
    let mut rnd_opt = rnd
        .as_ref()
        .map(|r| AdamW::new(r.predictor.n_params(), config.lr_policy));

    let schedule = LinearLrSchedule {
        start_factor: 1.0,
        end_factor: config.lr_end_factor,
        total_steps: config.iterations as u64,
    };

    let target: Option<Distribution> = if env.enumerable() {
        Some(TerminalTable::from_env(env, config.enumeration_cap)?.target())
    } else {
        None
    };

    let mut history = TerminalHistory::default();
    let mut records = Vec::new();
    let half = config.batch_size / 2;

    for it in 0..config.iterations {
        let lr_factor = schedule.factor(it as u64);
        let stats = run_iteration(
            config,
            env,
            &mut canonical,
            &mut canonical_opt,
            companion.as_mut(),
            companion_opt.as_mut(),
            rnd.as_mut(),
            rnd_opt.as_mut(),
            half,
            lr_factor,
            &mut history,
            &mut rng,
        )
        .map_err(|e| AceError::TrainingAborted {
            iteration: it as u64,
            reason: e.to_string(),
        })?;

        if (it + 1) % config.eval_every == 0 || it + 1 == config.iterations {
            let tv = match &target {
                Some(t) => {
                    let mut eval = PolicyEvaluator::new(&canonical.forward, env);
                    let marginal =
                        exact_marginal(env, &mut eval, 0.0, config.enumeration_cap)?;
                    Some(tv_distance(&marginal, t)?)
                }
                None => None,
            };
            records.push(MetricRecord {
                iteration: it + 1,
                trajectories_consumed: (it + 1) * config.batch_size,
                tv,
                log_z: canonical.log_z,
                log_z_div: companion.as_ref().map(|n| n.log_z),
                w: stats.w,
                mean_loss_canonical: stats.loss_canonical,
                mean_loss_exploration: stats.loss_exploration,
                topk_mean_reward: topk_unique_mean(&history.log_rewards(), config.top_k),
                modes_found: config.env.has_modes().then(|| history.modes_found()),
                unique_terminals: history.unique_terminals(),
            });
        }
    }

    Ok(TrainOutput {
        config: config.clone(),
        records,
        net: canonical,
        companion,
        history,
        canonical_opt,
        companion_opt,
        rnd,
        rnd_opt,
        rng,
        iterations_done: config.iterations,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    config: &TrainConfig,
    env: &dyn StateGraph,
    canonical: &mut GFlowNet,
    canonical_opt: &mut NetOptimizers,
    companion: Option<&mut GFlowNet>,
    companion_opt: Option<&mut NetOptimizers>,
    rnd: Option<&mut Rnd>,
    rnd_opt: Option<&mut AdamW>,
    half: usize,
    lr_factor: f64,
    history: &mut TerminalHistory,
    rng: &mut ChaCha8Rng,
) -> Result<IterationStats> {
    match config.method {
        Method::Tb => {
            let batch = sample_batch(env, canonical, config.batch_size, config.epsilon, rng)?;
            for t in &batch {
                history.observe(env, t.states.last().unwrap());
            }
            let lrs: Vec<f64> = batch.iter().map(|t| t.log_reward).collect();
            let (loss, grads) = loss_and_grad(net_groups(canonical), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, canonical);
                tb_batch_mean(tape, &mut scorer, &batch, &lrs)
            })?;
            apply_step(canonical, canonical_opt, &grads, lr_factor)?;
            Ok(IterationStats {
                loss_canonical: loss,
                loss_exploration: None,
                w: None,
            })
        }

        Method::Ace => {
            let explorer = companion.expect("two-sampler method carries a companion");
            let explorer_opt = companion_opt.expect("companion optimizer present");
            let on = sample_batch(env, canonical, half, 0.0, rng)?;
            let ex = sample_batch(env, explorer, half, config.epsilon, rng)?;
            for t in on.iter().chain(&ex) {
                history.observe(env, t.states.last().unwrap());
            }

            // Both the mixing weight and the allocation verdicts are taken
            // under the canonical parameters before this iteration's update,
            // reusing each exploration trajectory as the backward sample for
            // its own terminal. The canonical loss pass already scores those
            // trajectories, so the verdicts read its residuals: the residual
            // is the induced log-reward shifted by the true one, hence the
            // zero reference.
            let w = mixing_weight(canonical.log_z, explorer.log_z);
            let mut residuals = Vec::with_capacity(ex.len());
            let (c_loss, grads) = loss_and_grad(net_groups(canonical), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, canonical);
                weighted_canonical_loss_with_residuals(
                    tape,
                    &mut scorer,
                    &on,
                    &ex,
                    w,
                    &mut residuals,
                )
            })?;
            let verdicts: Vec<AllocationVerdict> = residuals
                .iter()
                .map(|&r| classify_allocation(r, 0.0, config.alpha))
                .collect();
            apply_step(canonical, canonical_opt, &grads, lr_factor)?;

            let (x_loss, grads) = loss_and_grad(net_groups(explorer), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, explorer);
                dtb_batch_mean(tape, &mut scorer, &ex, &verdicts, config.beta)
            })?;
            apply_step(explorer, explorer_opt, &grads, lr_factor)?;

            Ok(IterationStats {
                loss_canonical: c_loss,
                loss_exploration: Some(x_loss),
                w: Some(w),
            })
        }

        Method::At => {
            let teacher = companion.expect("two-sampler method carries a companion");
            let teacher_opt = companion_opt.expect("companion optimizer present");
            let on = sample_batch(env, canonical, half, 0.0, rng)?;
            let ex = sample_batch(env, teacher, half, config.epsilon, rng)?;
            for t in on.iter().chain(&ex) {
                history.observe(env, t.states.last().unwrap());
            }

            // Teacher targets come from the student's residual before the
            // student moves this iteration; the student's loss pass already
            // scores the exploration batch, and its balance residual is the
            // negated student delta.
            let mut residuals = Vec::with_capacity(ex.len());
            let (c_loss, grads) = loss_and_grad(net_groups(canonical), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, canonical);
                weighted_canonical_loss_with_residuals(
                    tape,
                    &mut scorer,
                    &on,
                    &ex,
                    0.5,
                    &mut residuals,
                )
            })?;
            let targets: Vec<f64> = residuals
                .iter()
                .zip(&ex)
                .map(|(&r, t)| teacher_log_reward(-r, t.log_reward, &config.teacher))
                .collect();
            apply_step(canonical, canonical_opt, &grads, lr_factor)?;

            let (t_loss, grads) = loss_and_grad(net_groups(teacher), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, teacher);
                tb_batch_mean(tape, &mut scorer, &ex, &targets)
            })?;
            apply_step(teacher, teacher_opt, &grads, lr_factor)?;

            Ok(IterationStats {
                loss_canonical: c_loss,
                loss_exploration: Some(t_loss),
                w: Some(0.5),
            })
        }

        Method::Sa => {
            let explorer = companion.expect("two-sampler method carries a companion");
            let explorer_opt = companion_opt.expect("companion optimizer present");
            let rnd = rnd.expect("novelty method carries a distillation pair");
            let rnd_opt = rnd_opt.expect("distillation optimizer present");
            let on = sample_batch(env, canonical, half, 0.0, rng)?;
            let ex = sample_batch(env, explorer, half, config.epsilon, rng)?;
            for t in on.iter().chain(&ex) {
                history.observe(env, t.states.last().unwrap());
            }

            // Intrinsic bonuses accumulate over every state a trajectory
            // visits and are read off the distillation step's own forwards
            // before the predictor moves, so repeat visits lose their bonus
            // only next time.
            let mut visited = Vec::new();
            let mut spans = Vec::with_capacity(ex.len());
            for t in &ex {
                let start = visited.len();
                visited.extend(t.states.iter().cloned());
                spans.push(start..visited.len());
            }
            let mut intrinsics = Vec::new();
            rnd.update_with_intrinsics(env, &visited, rnd_opt, lr_factor, &mut intrinsics)?;
            let targets: Vec<f64> = ex
                .iter()
                .zip(&spans)
                .map(|(t, span)| {
                    let intrinsic: f64 = intrinsics[span.clone()].iter().sum();
                    novelty_log_reward(t.log_reward, intrinsic, &config.novelty)
                })
                .collect();

            let (c_loss, grads) = loss_and_grad(net_groups(canonical), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, canonical);
                weighted_canonical_loss(tape, &mut scorer, &on, &ex, 0.5)
            })?;
            apply_step(canonical, canonical_opt, &grads, lr_factor)?;

            let (x_loss, grads) = loss_and_grad(net_groups(explorer), |tape| {
                let mut scorer = TrajectoryScorer::new(tape, env, explorer);
                tb_batch_mean(tape, &mut scorer, &ex, &targets)
            })?;
            apply_step(explorer, explorer_opt, &grads, lr_factor)?;

            Ok(IterationStats {
                loss_canonical: c_loss,
                loss_exploration: Some(x_loss),
                w: Some(0.5),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EnvConfig, Method, TrainConfig};
    use crate::metrics::CSV_HEADER;

    fn tiny_grid_config(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::for_env(EnvConfig::Grid { dim: 2, side: 4 }, method, 42);
        cfg.iterations = 40;
        cfg.eval_every = 20;
        cfg.batch_size = 8;
        cfg.hidden = vec![16];
        cfg
    }

    #[test]
    fn every_method_trains_and_reports_on_a_small_grid() {
        for method in [Method::Tb, Method::Ace, Method::At, Method::Sa] {
            let cfg = tiny_grid_config(method);
            let out = train(&cfg).unwrap();
            assert_eq!(out.records.len(), 2, "{}", method.id());
            let last = out.final_record();
            assert_eq!(last.iteration, 40);
            assert_eq!(last.trajectories_consumed, 40 * 8);
            assert!(last.tv.unwrap() >= 0.0 && last.tv.unwrap() <= 1.0);
            assert!(last.mean_loss_canonical.is_finite());
            assert_eq!(out.companion.is_some(), method.two_samplers());
            assert_eq!(last.w.is_some(), method.two_samplers());
            assert_eq!(last.log_z_div.is_some(), method.two_samplers());
            assert!(last.unique_terminals > 0);
            assert!(out.history.modes_found() <= 4);
        }
    }

    #[test]
    fn same_seed_reproduces_records_exactly() {
        let cfg = tiny_grid_config(Method::Ace);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let rows = |o: &TrainOutput| {
            let mut s = CSV_HEADER.to_string();
            for r in &o.records {
                s.push('\n');
                s.push_str(&r.csv_row());
            }
            s
        };
        assert_eq!(rows(&a), rows(&b));
        assert_eq!(a.net.log_z.to_bits(), b.net.log_z.to_bits());
        for (x, y) in a.net.forward.params().iter().zip(b.net.forward.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut cfg = tiny_grid_config(Method::Tb);
        let a = train(&cfg).unwrap();
        cfg.seed = 43;
        let b = train(&cfg).unwrap();
        assert_ne!(a.net.log_z.to_bits(), b.net.log_z.to_bits());
    }

    #[test]
    fn tb_loss_shrinks_on_a_small_grid() {
        let mut cfg = tiny_grid_config(Method::Tb);
        cfg.iterations = 600;
        cfg.eval_every = 100;
        let out = train(&cfg).unwrap();
        let first = out.records.first().unwrap();
        let last = out.final_record();
        assert!(
            last.mean_loss_canonical < first.mean_loss_canonical,
            "loss went {} -> {}",
            first.mean_loss_canonical,
            last.mean_loss_canonical
        );
        assert!(last.tv.unwrap() < first.tv.unwrap());
    }

    #[test]
    fn learned_backward_trains_without_error() {
        let mut cfg = tiny_grid_config(Method::Ace);
        cfg.learned_backward = true;
        let out = train(&cfg).unwrap();
        assert!(out.net.backward.is_some());
        assert!(out.final_record().mean_loss_canonical.is_finite());
    }

    #[test]
    fn token_environment_trains_end_to_end() {
        let mut cfg = TrainConfig::for_env(
            EnvConfig::BitSeq {
                len: 6,
                n_modes: 3,
                mode_seed: 5,
            },
            Method::Ace,
            42,
        );
        cfg.iterations = 30;
        cfg.eval_every = 30;
        cfg.batch_size = 8;
        cfg.hidden = vec![16];
        let out = train(&cfg).unwrap();
        let last = out.final_record();
        assert!(last.tv.is_some(), "a 6-bit space is enumerable");
        assert!(last.modes_found.is_some());
    }

    #[test]
    fn walk_environment_trains_and_skips_tv_when_too_large() {
        let mut cfg = TrainConfig::for_env(EnvConfig::WalkRings { half_width: 4 }, Method::Sa, 42);
        cfg.iterations = 20;
        cfg.eval_every = 10;
        cfg.batch_size = 8;
        cfg.hidden = vec![16];
        let out = train(&cfg).unwrap();
        assert!(out.final_record().tv.is_some(), "small walk is enumerable");
        assert!(out.final_record().modes_found.is_some());
    }
}
