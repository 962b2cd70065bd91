//! The end-to-end commands: data generation, training, evaluation, analysis
//! and λ sweeps. Every command writes into an output directory together with
//! `config.resolved` and a `manifest.json` written last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{serve_top1, Agent, AgentDims, StepLog, TrainConfig, Trainer, train_log_csv};
use crate::checkpoint::{agent_checkpoint, agent_from_checkpoint, Checkpoint};
use crate::config::{Precision, RunConfig, EnvKind};
use crate::critic::AblationMode;
use crate::data::{
    load_store, save_sessions_csv, save_store, sessions_to_transitions, RewardMap, SessionRecord, TransitionOptions,
    TransitionStore,
};
use crate::encoder::{ItemId, StateWindow};
use crate::ensemble::PenaltyConfig;
use crate::error::{Error, Result};
use crate::evalharness::analysis::{
    absorbed_discount_csv, penalty_analysis, penalty_analysis_csv, penalty_toy, penalty_toy_csv,
};
use crate::evalharness::metrics::{evaluate_ranking, ranked_jsonl, MetricsReport, RankedRecord};
use crate::evalharness::overestimation::{dataset_states, overestimation_gap};
use crate::files;
use crate::numerics::AdamConfig;
use crate::seed::{self, fnv1a64, stream_rng, stream_seed};
use crate::simenv::{
    generate_dataset, value_iteration, BehaviorPolicy, Estimate, MicroConfig, MicroMdp, Policy, SimConfig, SimWorld,
};
use crate::Scalar;

pub const SESSIONS_CSV: &str = "sessions.csv";
pub const TEST_SESSIONS_CSV: &str = "test_sessions.csv";
pub const TRAIN_STORE: &str = "train.vpqt";
pub const TEST_STORE: &str = "test.vpqt";
pub const CHECKPOINT: &str = "checkpoint.vpqc";
pub const DIVERGED_CHECKPOINT: &str = "diverged.vpqc";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const RANKED_JSONL: &str = "ranked.jsonl";
pub const EVAL_JSON: &str = "eval.json";
pub const PENALTY_CSV: &str = "penalty_analysis.csv";
pub const ABSORBED_CSV: &str = "absorbed_discount.csv";
pub const TOY_CSV: &str = "penalty_toy.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_CELLS_CSV: &str = "sweep_cells.csv";
pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";

/// Tolerance for value iteration when computing the optimal table.
pub const VALUE_ITERATION_TOL: f64 = 1e-8;

/// The generative environment a config describes.
#[derive(Clone, Debug)]
pub enum Environment {
    Latent { world: SimWorld, behavior: BehaviorPolicy },
    Micro(MicroMdp),
}

impl Environment {
    /// Deterministic in the config: the world comes from the `world` stream,
    /// the micro MDP from the `mdp` stream.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        match cfg.env {
            EnvKind::Latent => {
                let sim = SimConfig {
                    n_items: cfg.n_items,
                    d_latent: cfg.d_latent,
                    theta_click: cfg.theta_click,
                    theta_purchase: cfg.theta_purchase,
                    drift: cfg.drift,
                    p_end: cfg.p_end,
                    user_concentration: cfg.user_concentration,
                };
                let world = SimWorld::new(sim, &mut stream_rng(cfg.seed, seed::WORLD))?;
                let behavior = BehaviorPolicy::parse(&cfg.behavior, cfg.behavior_param)?;
                Ok(Environment::Latent { world, behavior })
            }
            EnvKind::Micro => {
                let mc = MicroConfig {
                    n_items: cfg.micro_items,
                    coverage: cfg.micro_coverage,
                    p_end_min: cfg.micro_p_end_min,
                    p_end_max: cfg.micro_p_end_max,
                    ..MicroConfig::default()
                };
                Ok(Environment::Micro(MicroMdp::random(&mc, &mut stream_rng(cfg.seed, seed::MDP))?))
            }
        }
    }

    pub fn sessions(&self, cfg: &RunConfig, n_sessions: usize, seed: u64) -> Result<Vec<SessionRecord>> {
        match self {
            Environment::Latent { world, behavior } => {
                generate_dataset(world, behavior, n_sessions, cfg.effective_window_len(), seed)
            }
            Environment::Micro(mdp) => mdp.generate_dataset(n_sessions, seed),
        }
    }

    /// Discounted return of `policy`, episodes drawn from the `eval` stream.
    pub fn true_return(&self, policy: &impl Policy, cfg: &RunConfig) -> Result<Estimate> {
        let seed = stream_seed(cfg.seed, seed::EVAL);
        match self {
            Environment::Latent { world, .. } => {
                world.true_return(policy, cfg.effective_window_len(), cfg.eval_episodes, cfg.gamma, seed)
            }
            Environment::Micro(mdp) => mdp.true_return(policy, cfg.eval_episodes, cfg.gamma, seed),
        }
    }
}

pub fn transition_options(cfg: &RunConfig) -> TransitionOptions {
    TransitionOptions {
        catalog_size: cfg.catalog_size(),
        window_len: cfg.effective_window_len(),
        rewards: RewardMap { purchase: cfg.reward_purchase, click: cfg.reward_click, skip: cfg.reward_skip },
        include_skips_in_window: cfg.include_skips_in_window,
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_sessions: Vec<SessionRecord>,
    pub test_sessions: Vec<SessionRecord>,
    pub train: TransitionStore,
    pub test: TransitionStore,
}

/// Train sessions from the `data` stream, test sessions from the `test` stream.
pub fn generate_data(cfg: &RunConfig, env: &Environment) -> Result<Dataset> {
    cfg.validate()?;
    let train_sessions = env.sessions(cfg, cfg.n_sessions, stream_seed(cfg.seed, seed::DATA))?;
    let test_sessions = env.sessions(cfg, cfg.test_sessions, stream_seed(cfg.seed, seed::TEST))?;
    let opts = transition_options(cfg);
    let hash = cfg.hash();
    Ok(Dataset {
        train: sessions_to_transitions(&train_sessions, &opts)?.with_source(cfg.seed, hash),
        test: sessions_to_transitions(&test_sessions, &opts)?.with_source(cfg.seed, hash),
        train_sessions,
        test_sessions,
    })
}

pub fn agent_dims(cfg: &RunConfig) -> AgentDims {
    AgentDims {
        catalog_size: cfg.catalog_size(),
        window_len: cfg.effective_window_len(),
        d_embed: cfg.d_embed,
        d_state: cfg.d_state,
        heads: cfg.heads,
    }
}

pub fn train_config<T: Scalar>(cfg: &RunConfig) -> Result<TrainConfig<T>> {
    let c = TrainConfig {
        penalty: PenaltyConfig::new(cfg.penalty, T::lit(cfg.lambda), T::lit(cfg.gamma))?,
        ablation: cfg.ablation,
        batch_size: cfg.batch_size,
        sync_period: cfg.sync_period,
        adam: AdamConfig { lr: T::lit(cfg.lr), beta1: T::lit(cfg.beta1), beta2: T::lit(cfg.beta2), eps: T::lit(cfg.adam_eps) },
    };
    c.validate()?;
    Ok(c)
}

/// A finished or aborted training run. `failure` holds the error that
/// stopped it early; `agent` is then the state at the failure.
#[derive(Debug)]
pub struct TrainRun<T> {
    pub agent: Agent<T>,
    pub log: Vec<StepLog<T>>,
    pub failure: Option<Error>,
}

/// Trains for `cfg.steps`, logging every `cfg.log_every` steps and the last.
pub fn train_agent<T: Scalar>(cfg: &RunConfig, store: &TransitionStore) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let mut trainer = Trainer::<T>::new(agent_dims(cfg), train_config(cfg)?, cfg.seed)?;
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        match trainer.train_step(store) {
            Ok(row) => {
                if step % cfg.log_every == 0 || step == cfg.steps {
                    log.push(row);
                }
            }
            Err(e @ Error::Divergence(_)) => {
                return Ok(TrainRun { agent: trainer.agent, log, failure: Some(e) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun { agent: trainer.agent, log, failure: None })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub metrics: MetricsReport,
    pub ranked: Vec<RankedRecord>,
    pub true_return: Estimate,
    /// Mean overestimation over the training states; micro environment only.
    pub gap: Option<f64>,
}

pub fn evaluate_agent<T: Scalar>(
    cfg: &RunConfig,
    env: &Environment,
    agent: &Agent<T>,
    ablation: AblationMode,
    train: &TransitionStore,
    test: &TransitionStore,
) -> Result<EvalSummary> {
    for s in [train, test] {
        if s.catalog_size() != agent.dims.catalog_size || s.window_len() != agent.dims.window_len {
            return Err(Error::Config("model and dataset disagree on catalog size or window length".into()));
        }
    }
    let serve_q = ablation.serves_q();
    let ranker = |w: &StateWindow, k: usize| -> Result<Vec<ItemId>> { Ok(agent.recommend(w, k, serve_q)?.items().to_vec()) };
    let (metrics, ranked) = evaluate_ranking(&ranker, test, &cfg.eval_k.0)?;
    let true_return = env.true_return(&serve_top1(agent, ablation), cfg)?;
    let gap = match env {
        Environment::Micro(mdp) => {
            let q_star = value_iteration(mdp, cfg.gamma, VALUE_ITERATION_TOL)?;
            let q = |w: &StateWindow| Ok(agent.q_values(w)?.into_iter().map(|v| v.as_f64()).collect());
            Some(overestimation_gap(mdp, q, &q_star, &dataset_states(train))?)
        }
        Environment::Latent { .. } => None,
    };
    Ok(EvalSummary { metrics, ranked, true_return, gap })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    /// FNV-1a 64 of the contents, 16 hex digits.
    pub fnv1a: String,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest { path: path.display().to_string(), fnv1a: format!("{:016x}", fnv1a64(&files::read(path)?)) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
}

struct Output {
    dir: PathBuf,
    outputs: Vec<FileDigest>,
}

impl Output {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        files::create_dir_all(dir)?;
        let mut out = Output { dir: dir.to_path_buf(), outputs: Vec::new() };
        out.write(CONFIG_RESOLVED, cfg.resolved().as_bytes())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        files::write_atomic(&self.path(name), bytes)?;
        self.outputs.push(FileDigest { path: name.to_string(), fnv1a: format!("{:016x}", fnv1a64(bytes)) });
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig, inputs: Vec<FileDigest>, started: Instant) -> Result<RunManifest> {
        let m = RunManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: format!("{:016x}", cfg.hash()),
            seed: cfg.seed,
            inputs,
            outputs: self.outputs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        files::write_atomic(&self.dir.join(MANIFEST), json.as_bytes())?;
        Ok(m)
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let env = Environment::build(cfg)?;
    let data = generate_data(cfg, &env)?;
    let mut o = Output::create(out, cfg)?;
    save_sessions_csv(&o.path(SESSIONS_CSV), &data.train_sessions)?;
    save_sessions_csv(&o.path(TEST_SESSIONS_CSV), &data.test_sessions)?;
    save_store(&o.path(TRAIN_STORE), &data.train)?;
    save_store(&o.path(TEST_STORE), &data.test)?;
    for name in [SESSIONS_CSV, TEST_SESSIONS_CSV, TRAIN_STORE, TEST_STORE] {
        let mut d = digest(&o.path(name))?;
        d.path = name.to_string();
        o.outputs.push(d);
    }
    o.finish("gen-data", cfg, Vec::new(), started)
}

fn checkpoint_meta(cfg: &RunConfig, steps_done: u64) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("precision".into(), cfg.precision.to_string());
    m.insert("ablation".into(), cfg.ablation.to_string());
    m.insert("penalty".into(), cfg.penalty.to_string());
    m.insert("lambda".into(), cfg.lambda.to_string());
    m.insert("gamma".into(), cfg.gamma.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("steps_done".into(), steps_done.to_string());
    m.insert("config_hash".into(), format!("{:016x}", cfg.hash()));
    m
}

fn train_into<T: Scalar>(cfg: &RunConfig, store: &TransitionStore, o: &mut Output) -> Result<()> {
    let run = train_agent::<T>(cfg, store)?;
    let done = run.log.last().map_or(0, |r| r.step);
    let ck = agent_checkpoint(&run.agent, &checkpoint_meta(cfg, done));
    o.write(TRAIN_LOG, train_log_csv(&run.log).as_bytes())?;
    match run.failure {
        Some(e) => {
            o.write(DIVERGED_CHECKPOINT, &ck.encode())?;
            Err(e)
        }
        None => o.write(CHECKPOINT, &ck.encode()),
    }
}

/// Trains on `<data>/train.vpqt`. On divergence the agent at the failing
/// step is written to `diverged.vpqc` next to the partial log.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let store_path = data.join(TRAIN_STORE);
    let store = load_store(&store_path)?;
    let mut o = Output::create(out, cfg)?;
    match cfg.precision {
        Precision::F64 => train_into::<f64>(cfg, &store, &mut o)?,
        Precision::F32 => train_into::<f32>(cfg, &store, &mut o)?,
    }
    o.finish("train", cfg, vec![digest(&store_path)?], started)
}

#[derive(Serialize)]
struct EvalJson {
    ablation: String,
    true_return: f64,
    true_return_se: f64,
    episodes: usize,
    overestimation_gap: Option<f64>,
}

fn eval_into<T: Scalar>(
    cfg: &RunConfig,
    ck: &Checkpoint,
    train: &TransitionStore,
    test: &TransitionStore,
    o: &mut Output,
) -> Result<EvalSummary> {
    let agent = agent_from_checkpoint::<T>(ck)?;
    let ablation: AblationMode = ck.meta_parse("ablation")?;
    let env = Environment::build(cfg)?;
    let s = evaluate_agent(cfg, &env, &agent, ablation, train, test)?;
    o.write(METRICS_CSV, s.metrics.to_csv().as_bytes())?;
    o.write(METRICS_TXT, s.metrics.to_table().as_bytes())?;
    o.write(RANKED_JSONL, ranked_jsonl(&s.ranked).as_bytes())?;
    let j = EvalJson {
        ablation: ablation.to_string(),
        true_return: s.true_return.mean,
        true_return_se: s.true_return.std_err,
        episodes: s.true_return.n,
        overestimation_gap: s.gap,
    };
    o.write(EVAL_JSON, serde_json::to_string_pretty(&j).expect("plain record").as_bytes())?;
    Ok(s)
}

/// Ranking metrics on `<data>/test.vpqt` and the true return of the model's
/// serving policy in the config's environment.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(RunManifest, EvalSummary)> {
    let started = Instant::now();
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let (train_path, test_path) = (data.join(TRAIN_STORE), data.join(TEST_STORE));
    let train = load_store(&train_path)?;
    let test = load_store(&test_path)?;
    let mut o = Output::create(out, cfg)?;
    let precision: Precision = ck.meta_parse("precision")?;
    let s = match precision {
        Precision::F64 => eval_into::<f64>(cfg, &ck, &train, &test, &mut o)?,
        Precision::F32 => eval_into::<f32>(cfg, &ck, &train, &test, &mut o)?,
    };
    let inputs = vec![digest(checkpoint)?, digest(&train_path)?, digest(&test_path)?];
    Ok((o.finish("eval", cfg, inputs, started)?, s))
}

/// Closed-form penalty tables with their Monte-Carlo column, the absorbed
/// discount table, and the toy penalization table.
pub fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let rows = penalty_analysis(
        &cfg.analyze_n.0,
        cfg.analyze_mu,
        cfg.analyze_sigma,
        &cfg.analyze_lambdas.0,
        cfg.mc_trials,
        stream_seed(cfg.seed, seed::EVAL),
    )?;
    let pairs: Vec<(f64, f64)> = cfg.analyze_w.0.iter().map(|&w| (cfg.analyze_gamma, w)).collect();
    let toy = penalty_toy(cfg.toy_points, cfg.toy_mu, cfg.toy_sigma, &cfg.analyze_lambdas.0, cfg.seed)?;
    let mut o = Output::create(out, cfg)?;
    o.write(PENALTY_CSV, penalty_analysis_csv(&rows).as_bytes())?;
    o.write(ABSORBED_CSV, absorbed_discount_csv(&pairs)?.as_bytes())?;
    o.write(TOY_CSV, penalty_toy_csv(&toy).as_bytes())?;
    o.finish("analyze", cfg, Vec::new(), started)
}

/// Generates data, trains and evaluates in memory for one config.
pub fn run_cell(cfg: &RunConfig) -> Result<EvalSummary> {
    let env = Environment::build(cfg)?;
    let data = generate_data(cfg, &env)?;
    fn go<T: Scalar>(cfg: &RunConfig, env: &Environment, data: &Dataset) -> Result<EvalSummary> {
        let run = train_agent::<T>(cfg, &data.train)?;
        if let Some(e) = run.failure {
            return Err(e);
        }
        evaluate_agent(cfg, env, &run.agent, cfg.ablation, &data.train, &data.test)
    }
    match cfg.precision {
        Precision::F64 => go::<f64>(cfg, &env, &data),
        Precision::F32 => go::<f32>(cfg, &env, &data),
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub lambda: f64,
    pub seed: u64,
    pub outcome: std::result::Result<(Estimate, Option<f64>), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
    pub gap_mean: Option<f64>,
    pub gap_std: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub warnings: Vec<String>,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

/// Distinct values in first-seen order, plus a warning per duplicate.
pub fn dedup_lambdas(lambdas: &[f64]) -> (Vec<f64>, Vec<String>) {
    let mut out: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for &l in lambdas {
        if out.contains(&l) {
            warnings.push(format!("duplicate lambda {l} ignored"));
        } else {
            out.push(l);
        }
    }
    (out, warnings)
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt());
    (Some(m), sd)
}

/// Trains and evaluates every `(λ, seed)` cell; failing cells are recorded
/// and the sweep continues.
pub fn sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let (lambdas, warnings) = dedup_lambdas(&cfg.sweep_lambdas.0);
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let mut returns = Vec::new();
        let mut gaps = Vec::new();
        let mut failed = 0;
        for &seed in &cfg.sweep_seeds.0 {
            let cell_cfg = RunConfig { lambda, seed, ..cfg.clone() };
            let outcome = run_cell(&cell_cfg).map(|s| (s.true_return, s.gap)).map_err(|e| e.to_string());
            match &outcome {
                Ok((r, g)) => {
                    returns.push(r.mean);
                    gaps.extend(*g);
                }
                Err(_) => failed += 1,
            }
            cells.push(SweepCell { lambda, seed, outcome });
        }
        let (return_mean, return_std) = mean_std(&returns);
        let (gap_mean, gap_std) = mean_std(&gaps);
        rows.push(SweepRow { lambda, n_ok: returns.len(), n_failed: failed, return_mean, return_std, gap_mean, gap_std });
    }
    Ok(SweepOutcome { warnings, cells, rows })
}

fn na(x: Option<f64>) -> String {
    x.map_or("NA".to_string(), |v| v.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,n_ok,n_failed,true_return_mean,true_return_std,gap_mean,gap_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.lambda,
            r.n_ok,
            r.n_failed,
            na(r.return_mean),
            na(r.return_std),
            na(r.gap_mean),
            na(r.gap_std)
        );
    }
    s
}

pub fn sweep_cells_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("lambda,seed,status,true_return,true_return_se,gap,error\n");
    for c in cells {
        let _ = match &c.outcome {
            Ok((r, g)) => writeln!(s, "{},{},ok,{},{},{},", c.lambda, c.seed, r.mean, r.std_err, na(*g)),
            Err(e) => writeln!(s, "{},{},failed,NA,NA,NA,\"{}\"", c.lambda, c.seed, e.replace('"', "'")),
        };
    }
    s
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, SweepOutcome)> {
    let started = Instant::now();
    let outcome = sweep(cfg)?;
    let mut o = Output::create(out, cfg)?;
    o.write(SWEEP_CSV, sweep_csv(&outcome.rows).as_bytes())?;
    o.write(SWEEP_CELLS_CSV, sweep_cells_csv(&outcome.cells).as_bytes())?;
    Ok((o.finish("sweep", cfg, Vec::new(), started)?, outcome))
}
