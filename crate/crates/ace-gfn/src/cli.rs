//! Command-line front end: single runs, multi-seed method comparisons,
//! threshold/tempering sweeps, and checkpoint inspection. Every run leaves a
//! self-describing directory (config, metric curves, checkpoint) plus an
//! entry in an atomically updated manifest at the output root.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{EnvConfig, Method, TrainConfig};
use crate::error::{AceError, Result};
use crate::graph::TerminalTable;
use crate::metrics::{topk_unique_mean, tv_distance, write_csv, write_jsonl, MetricRecord};
use crate::policy::PolicyEvaluator;
use crate::trainer::{train, TrainOutput};

#[derive(Debug, Parser)]
#[command(
    name = "ace-gfn",
    version,
    about = "Train cooperative flow-network samplers on benchmark DAG environments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write metrics plus a checkpoint.
    Run(RunArgs),
    /// Train several methods across seeds and aggregate their metric curves.
    Compare(CompareArgs),
    /// Sweep the coverage threshold and reward tempering over a seed set.
    Sweep(SweepArgs),
    /// Print a saved checkpoint's summary, re-deriving the exact terminal
    /// distribution when the state space is enumerable.
    EvalCheckpoint(EvalArgs),
}

/// Frequently tuned hyperparameters exposed as first-class flags; each one is
/// shorthand for the equivalent dotted --set override and is applied first,
/// so an explicit --set on the same field wins.
#[derive(Debug, Default, Args)]
pub struct HyperFlags {
    /// Coverage threshold separating over- from under-allocated terminals.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Reward tempering exponent for the exploration target.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Uniform-mixture weight of the exploration sampler's policy.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
}

impl HyperFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Environment id: grid, walk_rings, walk_gaussians, bitseq, seqdesign,
    /// bag, knapsack.
    #[arg(long)]
    pub env: String,
    /// Method id: ace, tb, at, sa.
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: HyperFlags,
    /// Config override as a dotted PATH=VALUE pair; repeatable
    /// (e.g. --set iterations=500 --set env.side=8).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Output root (default: $ACE_GFN_OUT, then ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub env: String,
    /// Comma-separated method ids.
    #[arg(long, default_value = "ace,tb,at,sa")]
    pub methods: String,
    /// Comma-separated seeds; defaults to the environment's benchmark seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Worker threads; 0 means one per available core.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "walk_rings")]
    pub env: String,
    #[arg(long, default_value = "ace")]
    pub method: String,
    /// Comma-separated coverage thresholds.
    #[arg(long, default_value = "0.1,0.2,0.4,0.7")]
    pub alphas: String,
    /// Comma-separated tempering exponents.
    #[arg(long, default_value = "0.25,0.5,1.0")]
    pub betas: String,
    #[arg(long, default_value = "42,43,44")]
    pub seeds: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Per-cell hyperparameters other than the swept alpha and beta.
    #[command(flatten)]
    pub hyper: HyperFlags,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Path to a checkpoint written by `run`.
    #[arg(long)]
    pub path: PathBuf,
}

pub fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("ACE_GFN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_csv_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|_| AceError::Config(format!("bad {what} entry '{part}'")))?,
        );
    }
    if out.is_empty() {
        return Err(AceError::Config(format!("empty {what} list")));
    }
    Ok(out)
}

fn apply_sets(cfg: &mut TrainConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (path, value) = s
            .split_once('=')
            .ok_or_else(|| AceError::Config(format!("override '{s}' is not PATH=VALUE")))?;
        cfg.apply_override(path.trim(), value.trim())?;
    }
    Ok(())
}

/// Benchmark seeds per environment family.
pub fn default_seeds(env: &EnvConfig) -> Vec<u64> {
    match env {
        EnvConfig::WalkRings { .. } | EnvConfig::WalkGaussians { .. } => vec![42, 43, 44, 45, 46],
        _ => vec![42, 126, 210],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Run directory relative to the output root.
    pub path: String,
    pub trajectories_consumed: usize,
    pub final_tv: Option<f64>,
    pub final_topk: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

/// Serialized read-modify-write access to `manifest.json`; each write lands
/// via a temp file rename so readers never observe a torn file.
pub struct ManifestStore {
    path: PathBuf,
    lock: Mutex<()>,
}

impl ManifestStore {
    pub fn new(root: &Path) -> Self {
        ManifestStore {
            path: root.join("manifest.json"),
            lock: Mutex::new(()),
        }
    }

    pub fn read(&self) -> Result<Manifest> {
        if !self.path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&self.path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn upsert(&self, entry: ManifestEntry) -> Result<()> {
        let _guard = self.lock.lock().expect("manifest lock poisoned");
        let mut manifest = self.read()?;
        match manifest.runs.iter_mut().find(|r| r.id == entry.id) {
            Some(slot) => *slot = entry,
            None => manifest.runs.push(entry),
        }
        let tmp = self.path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

fn run_id(cfg: &TrainConfig) -> String {
    format!("{}_{}_s{}", cfg.env.id(), cfg.method.id(), cfg.seed)
}

fn pending_entry(cfg: &TrainConfig, id: &str) -> ManifestEntry {
    ManifestEntry {
        id: id.to_string(),
        env: cfg.env.id().to_string(),
        method: cfg.method.id().to_string(),
        seed: cfg.seed,
        status: RunStatus::Pending,
        path: id.to_string(),
        trajectories_consumed: 0,
        final_tv: None,
        final_topk: None,
        error: None,
    }
}

/// Final-state digest written next to each completed run's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub iterations: usize,
    pub trajectories_consumed: usize,
    pub final_tv: Option<f64>,
    pub log_z: f64,
    pub log_z_div: Option<f64>,
    /// `log_z` minus the enumerated log partition; absent when the terminal
    /// space cannot be enumerated.
    pub log_z_error: Option<f64>,
    pub topk_mean_reward: f64,
    pub modes_found: Option<usize>,
    pub unique_terminals: usize,
    pub wall_time_seconds: f64,
}

fn run_summary(cfg: &TrainConfig, id: &str, out: &TrainOutput, wall: f64) -> Result<RunSummary> {
    let last = out.final_record();
    let env = cfg.env.build();
    let log_z_error = if env.enumerable() {
        let table = TerminalTable::from_env(env.as_ref(), cfg.enumeration_cap)?;
        Some(out.net.log_z - table.log_partition)
    } else {
        None
    };
    Ok(RunSummary {
        id: id.to_string(),
        env: cfg.env.id().to_string(),
        method: cfg.method.id().to_string(),
        seed: cfg.seed,
        iterations: out.iterations_done,
        trajectories_consumed: last.trajectories_consumed,
        final_tv: last.tv,
        log_z: last.log_z,
        log_z_div: last.log_z_div,
        log_z_error,
        topk_mean_reward: last.topk_mean_reward,
        modes_found: last.modes_found,
        unique_terminals: last.unique_terminals,
        wall_time_seconds: wall,
    })
}

/// Trains one configuration into `root/<id>`, keeping the manifest current
/// through the running, done, and failed states; callers record the pending
/// state for every planned run before the first one starts.
pub fn execute_single(
    cfg: &TrainConfig,
    id: &str,
    root: &Path,
    store: &ManifestStore,
) -> Result<TrainOutput> {
    let dir = root.join(id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    let mut entry = pending_entry(cfg, id);
    entry.status = RunStatus::Running;
    store.upsert(entry.clone())?;

    let started = std::time::Instant::now();
    match train(cfg) {
        Ok(out) => {
            write_csv(&dir.join("metrics.csv"), &out.records)?;
            write_jsonl(&dir.join("metrics.jsonl"), &out.records)?;
            Checkpoint::from_output(&out).save(&dir.join("checkpoint.json"))?;
            let summary = run_summary(cfg, id, &out, started.elapsed().as_secs_f64())?;
            std::fs::write(
                dir.join("summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            let last = out.final_record();
            entry.status = RunStatus::Done;
            entry.trajectories_consumed = last.trajectories_consumed;
            entry.final_tv = last.tv;
            entry.final_topk = Some(last.topk_mean_reward);
            store.upsert(entry)?;
            Ok(out)
        }
        Err(e) => {
            entry.status = RunStatus::Failed;
            entry.error = Some(e.to_string());
            store.upsert(entry)?;
            Err(e)
        }
    }
}

/// One unit of work for the parallel executors.
struct Job {
    cfg: TrainConfig,
    id: String,
}

/// Runs jobs across `jobs` threads (0 means all cores), returning each job's
/// final metric record in input order with `None` marking a failed run. The
/// whole job list is recorded as pending before the first run starts.
fn run_jobs(
    jobs: usize,
    specs: Vec<Job>,
    root: &Path,
    store: &ManifestStore,
) -> Result<Vec<Option<MetricRecord>>> {
    for job in &specs {
        store.upsert(pending_entry(&job.cfg, &job.id))?;
    }
    let workers = if jobs == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        jobs
    }
    .min(specs.len().max(1));

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Option<MetricRecord>>>> =
        Mutex::new((0..specs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let job = &specs[i];
                let res = match execute_single(&job.cfg, &job.id, root, store) {
                    Ok(out) => {
                        let r = out.final_record().clone();
                        println!(
                            "[done] {} tv={} topk={}",
                            job.id,
                            r.tv.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                            r.topk_mean_reward
                        );
                        Some(r)
                    }
                    Err(e) => {
                        println!("[fail] {} {e}", job.id);
                        None
                    }
                };
                results.lock().expect("results lock poisoned")[i] = Some(res);
            });
        }
    });

    let collected = results.into_inner().expect("results lock poisoned");
    Ok(collected
        .into_iter()
        .map(|slot| slot.expect("every job is claimed by a worker"))
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let env = EnvConfig::from_id(&args.env)?;
    let method = Method::from_id(&args.method)?;
    let mut cfg = TrainConfig::for_env(env, method, args.seed);
    args.hyper.apply(&mut cfg);
    apply_sets(&mut cfg, &args.sets)?;
    cfg.validate()?;
    let root = out_root(&args.out);
    std::fs::create_dir_all(&root)?;
    let store = ManifestStore::new(&root);
    let id = run_id(&cfg);
    store.upsert(pending_entry(&cfg, &id))?;
    println!("[start] {id} ({} iterations)", cfg.iterations);
    let out = execute_single(&cfg, &id, &root, &store)?;
    let last = out.final_record();
    println!(
        "[done] {id} tv={} logz={} topk={} unique={}",
        opt_cell(last.tv),
        last.log_z,
        last.topk_mean_reward,
        last.unique_terminals
    );
    Ok(())
}

/// Per-method aggregation of aligned metric curves across seeds.
fn write_aggregate(
    path: &Path,
    by_method: &[(Method, Vec<Vec<MetricRecord>>)],
) -> Result<()> {
    let mut text = String::from(
        "method,iteration,trajectories_consumed,seeds,tv_mean,tv_std,topk_mean,topk_std,\
         modes_mean,unique_terminals_mean,log_z_mean\n",
    );
    for (method, curves) in by_method {
        let rows = curves[0].len();
        debug_assert!(curves.iter().all(|c| c.len() == rows));
        for r in 0..rows {
            let at: Vec<&MetricRecord> = curves.iter().map(|c| &c[r]).collect();
            let tvs: Option<Vec<f64>> = at.iter().map(|m| m.tv).collect();
            let topk: Vec<f64> = at.iter().map(|m| m.topk_mean_reward).collect();
            let modes: Option<Vec<f64>> =
                at.iter().map(|m| m.modes_found.map(|v| v as f64)).collect();
            let uniq: Vec<f64> = at.iter().map(|m| m.unique_terminals as f64).collect();
            let logz: Vec<f64> = at.iter().map(|m| m.log_z).collect();
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                method.id(),
                at[0].iteration,
                at[0].trajectories_consumed,
                at.len(),
                opt_cell(tvs.as_deref().map(mean)),
                opt_cell(tvs.as_deref().map(sample_std)),
                mean(&topk),
                sample_std(&topk),
                opt_cell(modes.as_deref().map(mean)),
                mean(&uniq),
                mean(&logz),
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Final-point ranking: ascending median terminal-distribution distance when
/// it is available, otherwise descending median top-k reward.
fn write_ranking(path: &Path, by_method: &[(Method, Vec<Vec<MetricRecord>>)]) -> Result<()> {
    let mut rows: Vec<(String, Option<f64>, f64)> = by_method
        .iter()
        .map(|(m, curves)| {
            let finals: Vec<&MetricRecord> = curves.iter().map(|c| c.last().unwrap()).collect();
            let tvs: Option<Vec<f64>> = finals.iter().map(|r| r.tv).collect();
            let topk: Vec<f64> = finals.iter().map(|r| r.topk_mean_reward).collect();
            (m.id().to_string(), tvs.as_deref().map(median), median(&topk))
        })
        .collect();
    let by_tv = rows.iter().all(|r| r.1.is_some());
    if by_tv {
        rows.sort_by(|a, b| a.1.unwrap().total_cmp(&b.1.unwrap()));
    } else {
        rows.sort_by(|a, b| b.2.total_cmp(&a.2));
    }
    let mut text = String::from("rank,method,tv_median,topk_median\n");
    for (i, (m, tv, topk)) in rows.iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", i + 1, m, opt_cell(*tv), topk));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let env = EnvConfig::from_id(&args.env)?;
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| Method::from_id(s.trim()))
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(AceError::Config("no methods given".into()));
    }
    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => parse_csv_list(s, "seed")?,
        None => default_seeds(&env),
    };

    let mut specs = Vec::new();
    for &method in &methods {
        for &seed in &seeds {
            let mut cfg = TrainConfig::for_env(env.clone(), method, seed);
            args.hyper.apply(&mut cfg);
            apply_sets(&mut cfg, &args.sets)?;
            cfg.validate()?;
            let id = run_id(&cfg);
            specs.push(Job { cfg, id });
        }
    }

    let root = out_root(&args.out);
    std::fs::create_dir_all(&root)?;
    let store = ManifestStore::new(&root);
    println!(
        "[compare] {} methods x {} seeds on {} ({} runs)",
        methods.len(),
        seeds.len(),
        env.id(),
        specs.len()
    );
    let total = methods.len() * seeds.len();
    let finals = run_jobs(args.jobs, specs, &root, &store)?;
    let failed = finals.iter().filter(|r| r.is_none()).count();

    // Full curves come from the per-run CSVs the jobs already wrote; the
    // aggregate only needs the records, which are re-read for simplicity
    // and to guarantee it reflects exactly what is on disk. Failed runs are
    // skipped; a method with no completed seed drops out entirely.
    let mut by_method = Vec::new();
    let mut cursor = 0;
    for &method in &methods {
        let mut curves = Vec::new();
        for &seed in &seeds {
            let completed = finals[cursor].is_some();
            cursor += 1;
            if !completed {
                continue;
            }
            let mut cfg = TrainConfig::for_env(env.clone(), method, seed);
            args.hyper.apply(&mut cfg);
            apply_sets(&mut cfg, &args.sets)?;
            let dir = root.join(run_id(&cfg));
            let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
            let records: Vec<MetricRecord> = text
                .lines()
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?;
            curves.push(records);
        }
        if !curves.is_empty() {
            by_method.push((method, curves));
        }
    }

    write_aggregate(&root.join(format!("aggregate_{}.csv", env.id())), &by_method)?;
    write_ranking(&root.join(format!("ranking_{}.csv", env.id())), &by_method)?;
    println!(
        "[compare] wrote aggregate_{0}.csv and ranking_{0}.csv under {1}",
        env.id(),
        root.display()
    );
    if failed > 0 {
        return Err(AceError::RunsFailed { failed, total });
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let env = EnvConfig::from_id(&args.env)?;
    let method = Method::from_id(&args.method)?;
    if args.hyper.alpha.is_some() || args.hyper.beta.is_some() {
        return Err(AceError::Config(
            "sweep owns alpha and beta; pass the grids via --alphas/--betas".into(),
        ));
    }
    let alphas: Vec<f64> = parse_csv_list(&args.alphas, "alpha")?;
    let betas: Vec<f64> = parse_csv_list(&args.betas, "beta")?;
    let seeds: Vec<u64> = parse_csv_list(&args.seeds, "seed")?;

    let mut specs = Vec::new();
    for &alpha in &alphas {
        for &beta in &betas {
            for &seed in &seeds {
                let mut cfg = TrainConfig::for_env(env.clone(), method, seed);
                args.hyper.apply(&mut cfg);
                apply_sets(&mut cfg, &args.sets)?;
                cfg.alpha = alpha;
                cfg.beta = beta;
                cfg.validate()?;
                let id = format!(
                    "{}_{}_a{}_b{}_s{}",
                    env.id(),
                    method.id(),
                    alpha,
                    beta,
                    seed
                );
                specs.push(Job { cfg, id });
            }
        }
    }

    let root = out_root(&args.out);
    std::fs::create_dir_all(&root)?;
    let store = ManifestStore::new(&root);
    println!(
        "[sweep] {} alphas x {} betas x {} seeds on {} ({} runs)",
        alphas.len(),
        betas.len(),
        seeds.len(),
        env.id(),
        specs.len()
    );
    let total = specs.len();
    let finals = run_jobs(args.jobs, specs, &root, &store)?;
    let failed = finals.iter().filter(|r| r.is_none()).count();

    let mut rows = String::from(
        "alpha,beta,seed,final_tv,final_topk,modes_found,unique_terminals,log_z,log_z_div\n",
    );
    let mut summary = String::from("alpha,beta,tv_mean,tv_std,tv_min,tv_max\n");
    let mut i = 0;
    for &alpha in &alphas {
        for &beta in &betas {
            let mut cell_tvs = Vec::new();
            for &seed in &seeds {
                let Some(r) = &finals[i] else {
                    i += 1;
                    continue;
                };
                i += 1;
                rows.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    alpha,
                    beta,
                    seed,
                    opt_cell(r.tv),
                    r.topk_mean_reward,
                    r.modes_found.map(|m| m.to_string()).unwrap_or_default(),
                    r.unique_terminals,
                    r.log_z,
                    opt_cell(r.log_z_div),
                ));
                if let Some(tv) = r.tv {
                    cell_tvs.push(tv);
                }
            }
            if !cell_tvs.is_empty() {
                let lo = cell_tvs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cell_tvs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                summary.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    alpha,
                    beta,
                    mean(&cell_tvs),
                    sample_std(&cell_tvs),
                    lo,
                    hi
                ));
            }
        }
    }
    std::fs::write(root.join(format!("sweep_{}.csv", env.id())), rows)?;
    std::fs::write(root.join(format!("sweep_summary_{}.csv", env.id())), summary)?;
    println!(
        "[sweep] wrote sweep_{0}.csv and sweep_summary_{0}.csv under {1}",
        env.id(),
        root.display()
    );
    if failed > 0 {
        return Err(AceError::RunsFailed { failed, total });
    }
    Ok(())
}

pub fn cmd_eval_checkpoint(args: &EvalArgs) -> Result<()> {
    let cp = Checkpoint::load(&args.path)?;
    let env = cp.config.env.build();
    println!(
        "checkpoint: {} {} seed={} iterations={} consumed={}",
        cp.config.env.id(),
        cp.config.method.id(),
        cp.config.seed,
        cp.iterations_done,
        cp.trajectories_consumed
    );
    println!("log_z: {}", cp.net.log_z);
    if let Some(c) = &cp.companion {
        println!("log_z_div: {}", c.log_z);
    }
    let history = cp.history.restore();
    if !history.is_empty() {
        println!(
            "unique_terminals: {}\nmodes_found: {}\ntopk_mean_reward: {}",
            history.unique_terminals(),
            history.modes_found(),
            topk_unique_mean(&history.log_rewards(), cp.config.top_k)
        );
    }
    if env.enumerable() {
        let table = TerminalTable::from_env(env.as_ref(), cp.config.enumeration_cap)?;
        let mut eval = PolicyEvaluator::new(&cp.net.forward, env.as_ref());
        let marginal = crate::graph::exact_marginal(
            env.as_ref(),
            &mut eval,
            0.0,
            cp.config.enumeration_cap,
        )?;
        println!("tv: {}", tv_distance(&marginal, &table.target())?);
        println!("log_z_exact: {}", table.log_partition);
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::EvalCheckpoint(a) => cmd_eval_checkpoint(a),
    }
}
