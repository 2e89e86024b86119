//! Configuration, stage orchestration, experiment runners and results output.
//!
//! Every stage is available in memory (used by the experiment runners) and as
//! a file-backed step (used by the CLI). Both paths derive all randomness from
//! the run seed and the target task id only, so a stage rerun from its saved
//! inputs reproduces the in-memory result exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{self, ContrastiveError, ContrastiveNet, SharingConfig, Strategy};
use crate::datasets::{self, DatasetError, EffectiveDataset, MultiTaskDataset, Transition};
use crate::gridsim::{
    build_env, mean_std, BehaviorPolicy, GridError, GridSpec, GroundTruthEnv, TaskSpec,
};
use crate::rng;
use crate::sac::{self, Actor, SacConfig, SacError, SacPolicy, TrainingLog};
use crate::worldmodel::{WorldConfig, WorldCurves, WorldError, WorldModel};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {path} (produced by `{stage}`)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Sac(#[from] SacError),
}

impl HarnessError {
    /// Short stable category used in one-line CLI error reports.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::MissingArtifact { .. } => "missing-artifact",
            HarnessError::Io { .. } => "io",
            HarnessError::Grid(_) => "env",
            HarnessError::Dataset(_) => "dataset",
            HarnessError::Contrastive(_) => "contrastive",
            HarnessError::World(_) => "world",
            HarnessError::Sac(_) => "sac",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Moda,
    ModaMinus,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Moda => "moda",
            Variant::ModaMinus => "moda_minus",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moda" => Ok(Variant::Moda),
            "moda-minus" | "moda_minus" => Ok(Variant::ModaMinus),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSection {
    pub grid: GridSpec,
    pub tasks: Vec<TaskSpec>,
    pub step_cost: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Trajectories generated per task, indexed by task id.
    pub trajectories: Vec<usize>,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub rollouts: usize,
    pub seeds: Vec<u64>,
    /// Evaluate the argmax action rather than sampling the policy.
    pub deterministic: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rollouts: 20,
            seeds: vec![0, 1, 2],
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    /// Target tasks; empty means every task.
    pub targets: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub variants: Vec<Variant>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            strategies: vec![Strategy::Contrastive],
            variants: vec![Variant::Moda, Variant::ModaMinus],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentSection {
    /// Profile name (`expert`, `medium`, `random`) → task id.
    pub profiles: BTreeMap<String, usize>,
    /// Data-poor target of the sharing comparison.
    pub scarce_target: Option<usize>,
    /// Shared-transition counts of the count sweep.
    pub counts: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env: EnvSection,
    pub data: DataSection,
    #[serde(default)]
    pub contrastive: SharingConfig,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.env.tasks.len();
        if n == 0 {
            return Err(HarnessError::Config("env.tasks is empty".into()));
        }
        if self.data.trajectories.len() != n {
            return Err(HarnessError::Config(format!(
                "data.trajectories has {} entries for {n} tasks",
                self.data.trajectories.len()
            )));
        }
        if self.data.max_len == 0 {
            return Err(HarnessError::Config("data.max_len must be positive".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(HarnessError::Config("eval.seeds is empty".into()));
        }
        if self.eval.rollouts == 0 {
            return Err(HarnessError::Config(
                "eval.rollouts must be positive".into(),
            ));
        }
        let referenced = self
            .pipeline
            .targets
            .iter()
            .chain(self.experiment.profiles.values())
            .chain(self.experiment.scarce_target.iter());
        for &t in referenced {
            if t >= n {
                return Err(HarnessError::Config(format!("task {t} is not configured")));
            }
        }
        if let Some(c) = self.experiment.counts.iter().find(|&&c| c < 0) {
            return Err(HarnessError::Config(format!(
                "shared count {c} is negative"
            )));
        }
        self.contrastive.validate()?;
        self.world.validate()?;
        self.sac.validate()?;
        self.env.grid.validate()?;
        Ok(())
    }

    pub fn targets(&self) -> Vec<usize> {
        if self.pipeline.targets.is_empty() {
            (0..self.env.tasks.len()).collect()
        } else {
            self.pipeline.targets.clone()
        }
    }

    /// Hex SHA-256 prefix of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Sets a dotted key such as `contrastive.lambda` or `world.threshold`
    /// from its textual value.
    pub fn with_key(&self, key: &str, value: &str) -> Result<Self, HarnessError> {
        let mut json = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut json;
        for part in key.split('.') {
            slot = match slot {
                serde_json::Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| HarnessError::Config(format!("unknown config key {key}")))?,
                serde_json::Value::Array(items) => {
                    let i: usize = part.parse().map_err(|_| {
                        HarnessError::Config(format!("bad index {part:?} in {key}"))
                    })?;
                    items.get_mut(i).ok_or_else(|| {
                        HarnessError::Config(format!("index {i} out of range in {key}"))
                    })?
                }
                _ => return Err(HarnessError::Config(format!("unknown config key {key}"))),
            };
        }
        *slot = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let cfg: Self = serde_json::from_value(json)
            .map_err(|e| HarnessError::Config(format!("{key}={value}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-stage seeds for one (run seed, target) cell.
fn stage_seed(run_seed: u64, stage: u64, target: usize) -> u64 {
    rng::sub_seed(run_seed, stage * 1000 + target as u64)
}

pub fn environment(cfg: &PipelineConfig) -> Result<GroundTruthEnv, HarnessError> {
    Ok(build_env(
        cfg.env.grid.clone(),
        cfg.env.tasks.clone(),
        cfg.env.step_cost,
        cfg.env.seed,
    )?)
}

pub fn generate_dataset(
    cfg: &PipelineConfig,
    env: &GroundTruthEnv,
    seed: u64,
) -> Result<MultiTaskDataset, HarnessError> {
    let mut tasks = Vec::with_capacity(env.tasks.len());
    for (task, &count) in env.tasks.iter().zip(&cfg.data.trajectories) {
        let trajectories = if count == 0 {
            Vec::new()
        } else {
            env.generate_trajectories(task, count, cfg.data.max_len, stage_seed(seed, 1, task.id))?
        };
        tasks.push(trajectories);
    }
    Ok(MultiTaskDataset::new(env.grid.clone(), tasks)?)
}

pub fn contrastive_config(cfg: &PipelineConfig, seed: u64, target: usize) -> SharingConfig {
    SharingConfig {
        seed: stage_seed(seed, 2, target),
        ..cfg.contrastive.clone()
    }
}

pub fn train_encoder(
    cfg: &PipelineConfig,
    ds: &MultiTaskDataset,
    target: usize,
    seed: u64,
) -> Result<ContrastiveNet, HarnessError> {
    let sc = contrastive_config(cfg, seed, target);
    let mut mining_rng = rng::derive(sc.seed, 0xC2);
    let set = contrastive::mine_triplets(ds, target, &sc, &mut mining_rng)?;
    let mut net = ContrastiveNet::new(&ds.grid, &sc);
    contrastive::train_contrastive(&mut net, &set, &sc)?;
    Ok(net)
}

pub fn share_with(
    cfg: &PipelineConfig,
    ds: &MultiTaskDataset,
    target: usize,
    strategy: Strategy,
    encoder: Option<&ContrastiveNet>,
) -> Result<EffectiveDataset, HarnessError> {
    match (strategy, encoder) {
        (Strategy::Contrastive, Some(f)) => Ok(contrastive::share(f, ds, target)?),
        (Strategy::Contrastive, None) => Err(HarnessError::Config(
            "contrastive sharing requires a trained encoder".into(),
        )),
        (kind, _) => Ok(contrastive::share_baseline(
            kind,
            ds,
            target,
            cfg.contrastive.w,
        )?),
    }
}

pub fn world_config(cfg: &PipelineConfig, seed: u64, target: usize) -> WorldConfig {
    WorldConfig {
        seed: stage_seed(seed, 3, target),
        ..cfg.world.clone()
    }
}

pub fn train_world(
    cfg: &PipelineConfig,
    grid: &GridSpec,
    transitions: &[Transition],
    target: usize,
    seed: u64,
) -> Result<(WorldModel, WorldCurves), HarnessError> {
    Ok(WorldModel::train(
        grid,
        target,
        transitions,
        &world_config(cfg, seed, target),
    )?)
}

pub fn sac_config(cfg: &PipelineConfig, seed: u64, target: usize) -> SacConfig {
    SacConfig {
        seed: stage_seed(seed, 4, target),
        ..cfg.sac.clone()
    }
}

pub fn train_actor(
    cfg: &PipelineConfig,
    world: &WorldModel,
    transitions: &[Transition],
    variant: Variant,
    target: usize,
    seed: u64,
) -> Result<(Actor, TrainingLog), HarnessError> {
    let threshold = match variant {
        Variant::Moda => cfg.world.threshold,
        Variant::ModaMinus => 0.0,
    };
    let sc = sac_config(cfg, seed, target);
    let mdp = world.robust_mdp(threshold, cfg.world.penalty, sc.discount, transitions)?;
    Ok(sac::train_policy(
        &mdp,
        world.dynamics.grid.state_len(),
        &sc,
    )?)
}

/// Undiscounted ground-truth returns of the learned policy.
pub fn evaluate_actor(
    cfg: &PipelineConfig,
    env: &GroundTruthEnv,
    actor: &Actor,
    target: usize,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let policy = SacPolicy {
        actor: actor.clone(),
        deterministic: cfg.eval.deterministic,
    };
    let task = env.task(target)?;
    Ok(env.evaluate_policy(
        &policy,
        task,
        cfg.eval.rollouts,
        stage_seed(seed, 5, target),
    )?)
}

pub fn evaluate_behavior(
    cfg: &PipelineConfig,
    env: &GroundTruthEnv,
    target: usize,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let task = env.task(target)?;
    let policy = BehaviorPolicy { env, task };
    Ok(env.evaluate_policy(
        &policy,
        task,
        cfg.eval.rollouts,
        stage_seed(seed, 5, target),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task_id: usize,
    pub strategy: String,
    pub variant: String,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub shared_transitions: usize,
    pub config_hash: String,
}

impl ResultRow {
    fn key(&self) -> (usize, &str, &str, u64, &str) {
        (
            self.task_id,
            &self.strategy,
            &self.variant,
            self.seed,
            &self.config_hash,
        )
    }
}

pub const RESULTS_HEADER: &str =
    "task_id,strategy,variant,seed,mean_return,std_return,shared_transitions,config_hash";

/// Writes rows sorted by (task, strategy, variant, seed, config hash).
pub fn emit_results(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Config("no result rows to write".into()));
    }
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.key().cmp(&b.key()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(RESULTS_HEADER.split(','))
        .map_err(|e| csv_err(path, e))?;
    for r in sorted {
        writer
            .write_record([
                r.task_id.to_string(),
                r.strategy.clone(),
                r.variant.clone(),
                r.seed.to_string(),
                r.mean_return.to_string(),
                r.std_return.to_string(),
                r.shared_transitions.to_string(),
                r.config_hash.clone(),
            ])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// `(x, y)` pairs as a two-column CSV with the given header.
pub fn write_curve(path: &Path, header: &str, columns: &[&[f64]]) -> Result<(), HarnessError> {
    let mut text = String::from(header);
    text.push('\n');
    let len = columns.iter().map(|c| c.len()).min().unwrap_or(0);
    for k in 0..len {
        let _ = write!(text, "{k}");
        for c in columns {
            let _ = write!(text, ",{}", c[k]);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Summary means used by the ordering checks.
pub fn mean_by<F: Fn(&ResultRow) -> bool>(rows: &[ResultRow], pick: F) -> f64 {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| pick(r))
        .map(|r| r.mean_return)
        .collect();
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Cell outcome of one (target, strategy, seed): the rows for each variant.
struct Cell {
    rows: Vec<ResultRow>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &PipelineConfig,
    env: &GroundTruthEnv,
    transitions: &[Transition],
    shared: usize,
    strategy: &str,
    variants: &[Variant],
    target: usize,
    seed: u64,
    hash: &str,
) -> Result<Cell, HarnessError> {
    let (world, _) = train_world(cfg, &env.grid, transitions, target, seed)?;
    let rows = variants
        .par_iter()
        .map(|&variant| {
            let (actor, _) = train_actor(cfg, &world, transitions, variant, target, seed)?;
            let (mean, std) = evaluate_actor(cfg, env, &actor, target, seed)?;
            Ok(ResultRow {
                task_id: target,
                strategy: strategy.to_string(),
                variant: variant.as_str().to_string(),
                seed,
                mean_return: mean,
                std_return: std,
                shared_transitions: shared,
                config_hash: hash.to_string(),
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(Cell { rows })
}

fn profile(cfg: &PipelineConfig, name: &str) -> Result<usize, HarnessError> {
    cfg.experiment
        .profiles
        .get(name)
        .copied()
        .ok_or_else(|| HarnessError::Config(format!("experiment.profiles lacks {name:?}")))
}

/// All rows of an in-memory pipeline over `targets × strategies × variants × seeds`.
pub fn run_in_memory(
    cfg: &PipelineConfig,
    targets: &[usize],
    strategies: &[Strategy],
    variants: &[Variant],
) -> Result<Vec<ResultRow>, HarnessError> {
    cfg.validate()?;
    let env = environment(cfg)?;
    let hash = cfg.hash();
    let per_seed: Vec<Vec<ResultRow>> = cfg
        .eval
        .seeds
        .par_iter()
        .map(|&seed| {
            let ds = generate_dataset(cfg, &env, seed)?;
            let mut rows = Vec::new();
            for &target in targets {
                let encoder = if strategies.contains(&Strategy::Contrastive) {
                    Some(train_encoder(cfg, &ds, target, seed)?)
                } else {
                    None
                };
                for &strategy in strategies {
                    let eff = share_with(cfg, &ds, target, strategy, encoder.as_ref())?;
                    let cell = run_cell(
                        cfg,
                        &env,
                        &eff.flatten(),
                        eff.shared_transition_count(),
                        strategy.as_str(),
                        variants,
                        target,
                        seed,
                        &hash,
                    )?;
                    rows.extend(cell.rows);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Expert, medium and random targets × {moda, moda_minus} × seeds with
/// contrastive sharing.
pub fn run_profile_comparison(cfg: &PipelineConfig) -> Result<Vec<ResultRow>, HarnessError> {
    let targets = ["expert", "medium", "random"]
        .iter()
        .map(|p| profile(cfg, p))
        .collect::<Result<Vec<_>, _>>()?;
    run_in_memory(
        cfg,
        &targets,
        &[Strategy::Contrastive],
        &[Variant::Moda, Variant::ModaMinus],
    )
}

/// The scarce target under each sharing strategy with the gated MDP.
pub fn run_sharing_comparison(cfg: &PipelineConfig) -> Result<Vec<ResultRow>, HarnessError> {
    let target = cfg
        .experiment
        .scarce_target
        .ok_or_else(|| HarnessError::Config("experiment.scarce_target is not set".into()))?;
    run_in_memory(
        cfg,
        &[target],
        &[
            Strategy::Contrastive,
            Strategy::None,
            Strategy::All,
            Strategy::Uds,
        ],
        &[Variant::Moda],
    )
}

/// The target's own transitions plus `count` other-task transitions drawn
/// uniformly from the contrastively shared set, topped up from unshared
/// other-task windows when the shared set is smaller.
pub fn subsample_shared(
    ds: &MultiTaskDataset,
    eff: &EffectiveDataset,
    count: usize,
    seed: u64,
) -> Vec<Transition> {
    let mut rng = rng::derive(seed, 0xF4);
    let mut transitions: Vec<Transition> = eff
        .own
        .iter()
        .flat_map(|x| x.transitions.iter().cloned())
        .collect();
    if count == 0 {
        return transitions;
    }
    let mut shared: Vec<&Transition> = eff.shared.iter().flat_map(|x| &x.transitions).collect();
    shared.shuffle(&mut rng);
    let mut chosen: Vec<Transition> = shared.iter().take(count).map(|t| (*t).clone()).collect();
    if chosen.len() < count {
        let taken: std::collections::HashSet<(usize, usize, usize)> =
            eff.shared.iter().map(|x| x.provenance()).collect();
        let mut pool: Vec<Transition> = (0..ds.n_tasks())
            .filter(|&t| t != eff.target)
            .flat_map(|t| ds.windows(t, eff.window))
            .filter(|x| !taken.contains(&x.provenance()))
            .flat_map(|x| x.transitions)
            .collect();
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(count - chosen.len()));
    }
    transitions.extend(chosen);
    transitions
}

/// Expert and random targets retrained with each shared count; the row's
/// `shared_transitions` holds the count and each count has its own hash.
pub fn run_shared_count_sweep(cfg: &PipelineConfig) -> Result<Vec<ResultRow>, HarnessError> {
    cfg.validate()?;
    if cfg.experiment.counts.is_empty() {
        return Err(HarnessError::Config("experiment.counts is empty".into()));
    }
    let targets = [profile(cfg, "expert")?, profile(cfg, "random")?];
    let env = environment(cfg)?;
    let counts: Vec<usize> = cfg.experiment.counts.iter().map(|&c| c as usize).collect();
    let per_seed: Vec<Vec<ResultRow>> = cfg
        .eval
        .seeds
        .par_iter()
        .map(|&seed| {
            let ds = generate_dataset(cfg, &env, seed)?;
            let mut rows = Vec::new();
            for &target in &targets {
                let encoder = train_encoder(cfg, &ds, target, seed)?;
                let eff = contrastive::share(&encoder, &ds, target)?;
                for &count in &counts {
                    let hash = count_hash(cfg, count);
                    let transitions =
                        subsample_shared(&ds, &eff, count, stage_seed(seed, 6, target));
                    let shared = transitions.len() - eff.own_transition_count();
                    let cell = run_cell(
                        cfg,
                        &env,
                        &transitions,
                        shared,
                        Strategy::Contrastive.as_str(),
                        &[Variant::Moda],
                        target,
                        seed,
                        &hash,
                    )?;
                    rows.extend(cell.rows);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// The config a count-sweep row is keyed by: the base config restricted to
/// that single count.
pub fn count_config(cfg: &PipelineConfig, count: usize) -> PipelineConfig {
    let mut c = cfg.clone();
    c.experiment.counts = vec![count as i64];
    c
}

fn count_hash(cfg: &PipelineConfig, count: usize) -> String {
    count_config(cfg, count).hash()
}

/// Shared count with the highest seed-averaged mean for `task`; ties go to
/// the smaller count.
pub fn best_count(rows: &[ResultRow], task: usize) -> Option<usize> {
    let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.task_id == task) {
        by_count
            .entry(r.shared_transitions)
            .or_default()
            .push(r.mean_return);
    }
    let mut best: Option<(usize, f64)> = None;
    for (c, v) in by_count {
        let m = mean_std(&v).0;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((c, m));
        }
    }
    best.map(|(c, _)| c)
}

/// File layout of one seed's run directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(out: &Path, seed: u64) -> Self {
        Self {
            root: out.join(format!("seed_{seed}")),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn encoder(&self, target: usize) -> PathBuf {
        self.root.join(format!("contrastive_task{target}.json"))
    }

    pub fn effective(&self, target: usize, strategy: Strategy) -> PathBuf {
        self.root.join(format!(
            "effective_task{target}_{}.jsonl",
            strategy.as_str()
        ))
    }

    pub fn world_stem(&self, target: usize, strategy: Strategy) -> String {
        format!("world_task{target}_{}", strategy.as_str())
    }

    pub fn actor(&self, target: usize, strategy: Strategy, variant: Variant) -> PathBuf {
        self.root.join(format!(
            "actor_task{target}_{}_{}.json",
            strategy.as_str(),
            variant.as_str()
        ))
    }

    fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, HarnessError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(HarnessError::MissingArtifact { path, stage })
        }
    }

    fn ensure(&self) -> Result<(), HarnessError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))
    }
}

/// File-backed stages; each reads only its declared inputs.
pub mod stages {
    use super::*;

    pub fn gen_data(cfg: &PipelineConfig, seed: u64) -> Result<PathBuf, HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        ws.ensure()?;
        let env = environment(cfg)?;
        let ds = generate_dataset(cfg, &env, seed)?;
        let path = ws.dataset();
        datasets::save_dataset(&ds, &path)?;
        Ok(path)
    }

    fn load_ds(ws: &Workspace) -> Result<MultiTaskDataset, HarnessError> {
        let path = Workspace::require(ws.dataset(), "gen-data")?;
        Ok(datasets::load_dataset(&path)?)
    }

    pub fn train_contrastive(
        cfg: &PipelineConfig,
        seed: u64,
        target: usize,
    ) -> Result<PathBuf, HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        let ds = load_ds(&ws)?;
        let net = train_encoder(cfg, &ds, target, seed)?;
        let path = ws.encoder(target);
        net.save(&path)?;
        write_curve(
            &ws.root.join(format!("contrastive_task{target}_loss.csv")),
            "epoch,loss",
            &[&net.loss_curve],
        )?;
        Ok(path)
    }

    pub fn share(
        cfg: &PipelineConfig,
        seed: u64,
        target: usize,
        strategy: Strategy,
    ) -> Result<PathBuf, HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        let ds = load_ds(&ws)?;
        let encoder = if strategy == Strategy::Contrastive {
            let path = Workspace::require(ws.encoder(target), "train-contrastive")?;
            let sc = contrastive_config(cfg, seed, target);
            Some(ContrastiveNet::load(&path, &ds.grid, &sc)?)
        } else {
            None
        };
        let eff = share_with(cfg, &ds, target, strategy, encoder.as_ref())?;
        let path = ws.effective(target, strategy);
        datasets::save_effective(&eff, &ds.grid, ds.n_tasks(), &path)?;
        Ok(path)
    }

    fn load_eff(
        ws: &Workspace,
        target: usize,
        strategy: Strategy,
    ) -> Result<(EffectiveDataset, GridSpec), HarnessError> {
        let path = Workspace::require(ws.effective(target, strategy), "share")?;
        Ok(datasets::load_effective(&path)?)
    }

    pub fn train_world(
        cfg: &PipelineConfig,
        seed: u64,
        target: usize,
        strategy: Strategy,
    ) -> Result<(), HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        let (eff, grid) = load_eff(&ws, target, strategy)?;
        let (world, curves) = super::train_world(cfg, &grid, &eff.flatten(), target, seed)?;
        let stem = ws.world_stem(target, strategy);
        world.save(&ws.root, &stem)?;
        write_curve(
            &ws.root.join(format!("{stem}_dynamics_loss.csv")),
            "epoch,loss",
            &[&curves.dynamics],
        )?;
        write_curve(
            &ws.root.join(format!("{stem}_gan_loss.csv")),
            "epoch,loss,d_loss,g_loss",
            &[&curves.gan.value, &curves.gan.d_loss, &curves.gan.g_loss],
        )?;
        Ok(())
    }

    fn load_world(
        cfg: &PipelineConfig,
        ws: &Workspace,
        grid: &GridSpec,
        target: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Result<WorldModel, HarnessError> {
        let stem = ws.world_stem(target, strategy);
        for suffix in ["state", "reward", "generator", "discriminator"] {
            Workspace::require(ws.root.join(format!("{stem}_{suffix}.json")), "train-world")?;
        }
        Ok(WorldModel::load(
            &ws.root,
            &stem,
            grid,
            target,
            &world_config(cfg, seed, target),
        )?)
    }

    pub fn train_policy(
        cfg: &PipelineConfig,
        seed: u64,
        target: usize,
        strategy: Strategy,
        variant: Variant,
    ) -> Result<PathBuf, HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        let (eff, grid) = load_eff(&ws, target, strategy)?;
        let world = load_world(cfg, &ws, &grid, target, strategy, seed)?;
        let (actor, log) = train_actor(cfg, &world, &eff.flatten(), variant, target, seed)?;
        let path = ws.actor(target, strategy, variant);
        actor.save(&path).map_err(WorldError::from)?;
        let lengths: Vec<f64> = log.episode_lengths.iter().map(|&l| l as f64).collect();
        write_curve(
            &ws.root.join(format!(
                "sac_task{target}_{}_{}_episodes.csv",
                strategy.as_str(),
                variant.as_str()
            )),
            "episode,return,length",
            &[&log.episode_returns, &lengths],
        )?;
        Ok(path)
    }

    pub fn evaluate(
        cfg: &PipelineConfig,
        seed: u64,
        target: usize,
        strategy: Strategy,
        variant: Variant,
    ) -> Result<ResultRow, HarnessError> {
        let ws = Workspace::new(&cfg.output.dir, seed);
        let (eff, grid) = load_eff(&ws, target, strategy)?;
        let path = Workspace::require(ws.actor(target, strategy, variant), "train-policy")?;
        let actor = Actor::load(&path, grid.state_len(), cfg.sac.hidden, grid.horizon)
            .map_err(WorldError::from)?;
        let env = environment(cfg)?;
        let (mean, std) = evaluate_actor(cfg, &env, &actor, target, seed)?;
        Ok(ResultRow {
            task_id: target,
            strategy: strategy.as_str().to_string(),
            variant: variant.as_str().to_string(),
            seed,
            mean_return: mean,
            std_return: std,
            shared_transitions: eff.shared_transition_count(),
            config_hash: cfg.hash(),
        })
    }

    /// Behavior-policy returns for every target, from the environment alone.
    pub fn evaluate_behaviors(
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<Vec<(usize, f64, f64)>, HarnessError> {
        let env = environment(cfg)?;
        cfg.targets()
            .into_iter()
            .map(|t| evaluate_behavior(cfg, &env, t, seed).map(|(m, s)| (t, m, s)))
            .collect()
    }

    /// Stores the config under its hash so every result row can be traced.
    pub fn snapshot_config(cfg: &PipelineConfig) -> Result<PathBuf, HarnessError> {
        let dir = cfg.output.dir.join("configs");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{}.json", cfg.hash()));
        let text = serde_json::to_string_pretty(cfg).expect("config serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Every stage for every seed, target, strategy and variant, then
    /// `results.csv` in the output directory.
    pub fn pipeline(cfg: &PipelineConfig) -> Result<Vec<ResultRow>, HarnessError> {
        cfg.validate()?;
        snapshot_config(cfg)?;
        let per_seed: Vec<Vec<ResultRow>> = cfg
            .eval
            .seeds
            .par_iter()
            .map(|&seed| {
                gen_data(cfg, seed)?;
                let mut rows = Vec::new();
                for target in cfg.targets() {
                    for &strategy in &cfg.pipeline.strategies {
                        if strategy == Strategy::Contrastive {
                            train_contrastive(cfg, seed, target)?;
                        }
                        share(cfg, seed, target, strategy)?;
                        train_world(cfg, seed, target, strategy)?;
                        let cell: Vec<ResultRow> = cfg
                            .pipeline
                            .variants
                            .par_iter()
                            .map(|&variant| {
                                train_policy(cfg, seed, target, strategy, variant)?;
                                evaluate(cfg, seed, target, strategy, variant)
                            })
                            .collect::<Result<_, HarnessError>>()?;
                        rows.extend(cell);
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_, HarnessError>>()?;
        let rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
        emit_results(&rows, &cfg.output.dir.join("results.csv"))?;
        Ok(rows)
    }
}
