//! Synthetic multi-task grid city: a seeded drifting feature field, compass
//! moves, linear per-task rewards and behavior policies of graded expertise.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Trajectory, Transition};
use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GridError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub const DEFAULT_FEATURE_NAMES: [&str; 5] = [
    "traffic_volume",
    "travel_demand",
    "traffic_speed",
    "waiting_time",
    "poi_distance",
];

fn default_feature_names() -> Vec<String> {
    DEFAULT_FEATURE_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Odd side length of the observed patch.
    pub patch: usize,
    /// Number of feature channels.
    pub features: usize,
    /// Time slots per episode.
    pub horizon: usize,
    #[serde(default = "default_feature_names")]
    pub feature_names: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 12,
            cols: 12,
            patch: 5,
            features: 5,
            horizon: 48,
            feature_names: default_feature_names(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: &str| Err(GridError::Config(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("grid rows and cols must be positive");
        }
        if self.features == 0 || self.horizon == 0 {
            return bad("feature count and horizon must be positive");
        }
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return bad("patch side must be odd and positive");
        }
        if self.patch > self.rows.min(self.cols) {
            return bad("patch side exceeds the grid");
        }
        if self.feature_names.len() < self.features {
            return bad("fewer feature names than feature channels");
        }
        Ok(())
    }

    /// Values per state patch, `n·l·l`.
    pub fn state_len(&self) -> usize {
        self.features * self.patch * self.patch
    }

    pub fn demand_channel(&self) -> usize {
        1.min(self.features - 1)
    }

    /// The time-invariant channel, present when all default channels are.
    pub fn poi_channel(&self) -> Option<usize> {
        (self.features >= 5).then_some(4)
    }
}

/// 1-based grid coordinate; `i` is the row (north is smaller `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
}

impl CellIndex {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub fn chebyshev(&self, other: &CellIndex) -> usize {
        self.i.abs_diff(other.i).max(self.j.abs_diff(other.j))
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
    Stay,
    Terminate,
}

impl Action {
    pub const COUNT: usize = 10;
    pub const ALL: [Action; 10] = [
        Action::N,
        Action::NE,
        Action::E,
        Action::SE,
        Action::S,
        Action::SW,
        Action::W,
        Action::NW,
        Action::Stay,
        Action::Terminate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    /// Row/column offset of a move; `None` for `Terminate`.
    pub fn delta(self) -> Option<(isize, isize)> {
        Some(match self {
            Action::N => (-1, 0),
            Action::NE => (-1, 1),
            Action::E => (0, 1),
            Action::SE => (1, 1),
            Action::S => (1, 0),
            Action::SW => (1, -1),
            Action::W => (0, -1),
            Action::NW => (-1, -1),
            Action::Stay => (0, 0),
            Action::Terminate => return None,
        })
    }

    pub fn one_hot(self) -> [f64; 10] {
        let mut v = [0.0; 10];
        v[self.index()] = 1.0;
        v
    }
}

/// Observed state: an `n×l×l` patch around `center` at time slot `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTensor {
    /// Channel-major `n × l × l` values.
    pub features: Vec<f64>,
    pub t: usize,
    pub center: CellIndex,
}

impl StateTensor {
    /// Features followed by the normalized time slot `t / horizon`; the
    /// representation every network consumes.
    pub fn flat_input(&self, horizon: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.features.len() + 1);
        v.extend_from_slice(&self.features);
        v.push(self.t as f64 / horizon as f64);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    /// Unit-norm weights over feature channels.
    pub weights: Vec<f64>,
    /// Probability of taking the one-step greedy action.
    pub expertise: f64,
    pub terminate_bonus: f64,
}

impl TaskSpec {
    /// Builds a task, rescaling `weights` to unit norm.
    pub fn normalized(id: usize, weights: &[f64], expertise: f64, terminate_bonus: f64) -> Self {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        Self {
            id,
            weights: weights.iter().map(|w| w / norm).collect(),
            expertise,
            terminate_bonus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Ground-truth environment. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthEnv {
    pub grid: GridSpec,
    /// Row-major `H × n × I × J`, every value in `[0, 1]`.
    field: Vec<f64>,
    pub tasks: Vec<TaskSpec>,
    pub step_cost: f64,
    pub seed: u64,
}

struct Bump {
    row: f64,
    col: f64,
    width: f64,
    amplitude: f64,
    drift_row: f64,
    drift_col: f64,
}

/// Builds the environment; the feature field is a pure function of `seed`.
pub fn build_env(
    grid: GridSpec,
    tasks: Vec<TaskSpec>,
    step_cost: f64,
    seed: u64,
) -> Result<GroundTruthEnv, GridError> {
    grid.validate()?;
    if tasks.is_empty() {
        return Err(GridError::Config("at least one task is required".into()));
    }
    for (k, task) in tasks.iter().enumerate() {
        if task.id != k {
            return Err(GridError::Config(format!(
                "task ids must be dense 0..N, found {} at position {k}",
                task.id
            )));
        }
        if task.weights.len() != grid.features {
            return Err(GridError::Config(format!(
                "task {k} has {} weights for {} features",
                task.weights.len(),
                grid.features
            )));
        }
        let norm = task.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(GridError::Config(format!(
                "task {k} weights have norm {norm}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&task.expertise) {
            return Err(GridError::Config(format!(
                "task {k} expertise outside [0, 1]"
            )));
        }
    }
    let field = generate_field(&grid, seed);
    Ok(GroundTruthEnv {
        grid,
        field,
        tasks,
        step_cost,
        seed,
    })
}

fn generate_field(grid: &GridSpec, seed: u64) -> Vec<f64> {
    let (h, n, rows, cols) = (grid.horizon, grid.features, grid.rows, grid.cols);
    let plane = rows * cols;
    let mut field = vec![0.0; h * n * plane];
    let mut rng = rng::seeded(seed);
    let span = rows.max(cols) as f64;
    for c in 0..n {
        let static_channel = grid.poi_channel() == Some(c);
        let bumps: Vec<Bump> = (0..rng.random_range(2..=4))
            .map(|_| {
                let speed = if static_channel {
                    0.0
                } else {
                    rng.random_range(0.0..0.15)
                };
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                Bump {
                    row: rng.random_range(1.0..=rows as f64),
                    col: rng.random_range(1.0..=cols as f64),
                    width: rng.random_range(0.12 * span..0.3 * span).max(1.0),
                    amplitude: rng.random_range(0.5..1.5),
                    drift_row: speed * heading.sin(),
                    drift_col: speed * heading.cos(),
                }
            })
            .collect();
        for t in 0..h {
            let base = (t * n + c) * plane;
            for i in 0..rows {
                for j in 0..cols {
                    field[base + i * cols + j] = bumps
                        .iter()
                        .map(|b| {
                            let di = (i + 1) as f64 - (b.row + b.drift_row * t as f64);
                            let dj = (j + 1) as f64 - (b.col + b.drift_col * t as f64);
                            b.amplitude * (-(di * di + dj * dj) / (2.0 * b.width * b.width)).exp()
                        })
                        .sum();
                }
            }
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..h {
            let base = (t * n + c) * plane;
            for v in &field[base..base + plane] {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        for t in 0..h {
            let base = (t * n + c) * plane;
            for v in &mut field[base..base + plane] {
                *v = (*v - lo) / range;
            }
        }
    }
    field
}

/// A policy over ground-truth states.
pub trait Policy {
    fn act(&self, state: &StateTensor, rng: &mut rng::Rng) -> Action;
}

impl GroundTruthEnv {
    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn field_shape(&self) -> [usize; 4] {
        [
            self.grid.horizon,
            self.grid.features,
            self.grid.rows,
            self.grid.cols,
        ]
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec, GridError> {
        self.tasks
            .get(id)
            .ok_or_else(|| GridError::Config(format!("unknown task {id}")))
    }

    /// Field value; time slots past the horizon read the last slot.
    pub fn value(&self, t: usize, channel: usize, cell: CellIndex) -> f64 {
        let g = &self.grid;
        let t = t.min(g.horizon - 1);
        self.field[((t * g.features + channel) * g.rows + (cell.i - 1)) * g.cols + (cell.j - 1)]
    }

    pub fn feature_vector(&self, t: usize, cell: CellIndex) -> Vec<f64> {
        (0..self.grid.features)
            .map(|c| self.value(t, c, cell))
            .collect()
    }

    /// `l×l` patch per channel around `center`, zero outside the grid.
    pub fn observe(&self, t: usize, center: CellIndex) -> StateTensor {
        let g = &self.grid;
        let l = g.patch;
        let half = (l / 2) as isize;
        let mut features = vec![0.0; g.state_len()];
        for c in 0..g.features {
            for di in 0..l {
                for dj in 0..l {
                    let i = center.i as isize + di as isize - half;
                    let j = center.j as isize + dj as isize - half;
                    if i >= 1 && j >= 1 && i <= g.rows as isize && j <= g.cols as isize {
                        features[(c * l + di) * l + dj] =
                            self.value(t, c, CellIndex::new(i as usize, j as usize));
                    }
                }
            }
        }
        StateTensor {
            features,
            t,
            center,
        }
    }

    /// Compass move clamped to the grid; an off-grid move stays put.
    pub fn move_center(&self, center: CellIndex, action: Action) -> CellIndex {
        move_on_grid(&self.grid, center, action)
    }

    /// One ground-truth transition for `task`.
    pub fn step(
        &self,
        state: &StateTensor,
        action: Action,
        task: &TaskSpec,
    ) -> Result<(StateTensor, StepOutcome), GridError> {
        if state.t >= self.grid.horizon {
            return Err(GridError::Contract(format!(
                "step at time slot {} past the horizon {}",
                state.t, self.grid.horizon
            )));
        }
        if action == Action::Terminate {
            let reward = task.terminate_bonus
                * self.value(state.t, self.grid.demand_channel(), state.center);
            return Ok((state.clone(), StepOutcome { reward, done: true }));
        }
        let center = self.move_center(state.center, action);
        let t = state.t + 1;
        let reward = self.move_reward(t, center, task);
        let next = self.observe(t, center);
        Ok((
            next,
            StepOutcome {
                reward,
                done: t >= self.grid.horizon,
            },
        ))
    }

    fn move_reward(&self, t: usize, center: CellIndex, task: &TaskSpec) -> f64 {
        let f = self.feature_vector(t, center);
        task.weights.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>() - self.step_cost
    }

    /// One-step reward of every action from `state`, in action-index order.
    pub fn one_step_rewards(&self, state: &StateTensor, task: &TaskSpec) -> [f64; 10] {
        let mut out = [0.0; 10];
        for a in Action::ALL {
            out[a.index()] = if a == Action::Terminate {
                task.terminate_bonus * self.value(state.t, self.grid.demand_channel(), state.center)
            } else {
                self.move_reward(state.t + 1, self.move_center(state.center, a), task)
            };
        }
        out
    }

    /// Argmax of the one-step reward, ties to the lowest action index.
    pub fn greedy_action(&self, state: &StateTensor, task: &TaskSpec) -> Action {
        let rewards = self.one_step_rewards(state, task);
        let mut best = 0;
        for (k, &r) in rewards.iter().enumerate() {
            if r > rewards[best] {
                best = k;
            }
        }
        Action::ALL[best]
    }

    /// Behavior policy: greedy with probability `task.expertise`, otherwise
    /// uniform over all ten actions.
    pub fn behavior_action(
        &self,
        state: &StateTensor,
        task: &TaskSpec,
        rng: &mut impl Rng,
    ) -> Action {
        if rng.random::<f64>() < task.expertise {
            self.greedy_action(state, task)
        } else {
            Action::ALL[rng.random_range(0..Action::COUNT)]
        }
    }

    pub fn random_start(&self, rng: &mut impl Rng) -> StateTensor {
        let i = Uniform::new_inclusive(1, self.grid.rows)
            .expect("rows > 0")
            .sample(rng);
        let j = Uniform::new_inclusive(1, self.grid.cols)
            .expect("cols > 0")
            .sample(rng);
        self.observe(0, CellIndex::new(i, j))
    }

    /// Behavior-policy trajectories from uniform start cells at slot 0, each
    /// ending at `Terminate`, the horizon, or `max_len` transitions.
    pub fn generate_trajectories(
        &self,
        task: &TaskSpec,
        count: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Vec<Trajectory>, GridError> {
        if count == 0 || max_len == 0 {
            return Err(GridError::Config(
                "count and max_len must be at least 1".into(),
            ));
        }
        (0..count)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::derive(seed, k as u64);
                let mut state = self.random_start(&mut rng);
                let mut transitions = Vec::new();
                while transitions.len() < max_len {
                    let action = self.behavior_action(&state, task, &mut rng);
                    let (next, out) = self.step(&state, action, task)?;
                    transitions.push(Transition {
                        state,
                        action,
                        next_state: next.clone(),
                        reward: out.reward,
                        task_id: task.id,
                    });
                    state = next;
                    if out.done {
                        break;
                    }
                }
                Ok(Trajectory {
                    task_id: task.id,
                    transitions,
                })
            })
            .collect()
    }

    /// Runs `rollouts` episodes from random starts; returns the sample mean
    /// and standard deviation of undiscounted returns.
    pub fn evaluate_policy<P: Policy + Sync + ?Sized>(
        &self,
        policy: &P,
        task: &TaskSpec,
        rollouts: usize,
        seed: u64,
    ) -> Result<(f64, f64), GridError> {
        let returns = self.rollout_returns(policy, task, rollouts, seed)?;
        Ok(mean_std(&returns))
    }

    pub fn rollout_returns<P: Policy + Sync + ?Sized>(
        &self,
        policy: &P,
        task: &TaskSpec,
        rollouts: usize,
        seed: u64,
    ) -> Result<Vec<f64>, GridError> {
        if rollouts == 0 {
            return Err(GridError::Config("rollouts must be at least 1".into()));
        }
        (0..rollouts)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::derive(seed, k as u64);
                let mut state = self.random_start(&mut rng);
                let mut total = 0.0;
                loop {
                    let action = policy.act(&state, &mut rng);
                    let (next, out) = self.step(&state, action, task)?;
                    total += out.reward;
                    if out.done {
                        break;
                    }
                    state = next;
                }
                Ok(total)
            })
            .collect()
    }
}

pub fn move_on_grid(grid: &GridSpec, center: CellIndex, action: Action) -> CellIndex {
    match action.delta() {
        None => center,
        Some((di, dj)) => {
            let i = center.i as isize + di;
            let j = center.j as isize + dj;
            if i < 1 || j < 1 || i > grid.rows as isize || j > grid.cols as isize {
                center
            } else {
                CellIndex::new(i as usize, j as usize)
            }
        }
    }
}

/// Sample mean and (n − 1)-normalized standard deviation; std is 0 for n = 1.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The behavior policy of one task, usable wherever a [`Policy`] is.
pub struct BehaviorPolicy<'a> {
    pub env: &'a GroundTruthEnv,
    pub task: &'a TaskSpec,
}

impl Policy for BehaviorPolicy<'_> {
    fn act(&self, state: &StateTensor, rng: &mut rng::Rng) -> Action {
        self.env.behavior_action(state, self.task, rng)
    }
}

/// Always returns the same action.
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn act(&self, _: &StateTensor, _: &mut rng::Rng) -> Action {
        self.0
    }
}
