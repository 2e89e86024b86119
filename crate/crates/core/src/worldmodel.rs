//! Per-task learned dynamics with rewards, the transition GAN, and the robust
//! MDP that halts on transitions the discriminator deems unreliable.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Transition;
use crate::gridsim::{move_on_grid, Action, GridSpec, StateTensor};
use crate::nnkit::{self, loss, sigmoid, Adam, Layer, Network, NnError, Tensor};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("training error: {0}")]
    Training(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dyn_epochs: usize,
    pub gan_epochs: usize,
    pub lr_dyn: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Discriminator score below which a predicted transition halts the episode.
    pub threshold: f64,
    /// Reward of the halting transition.
    pub penalty: f64,
    pub z_dim: usize,
    pub hidden: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dyn_epochs: 500,
            gan_epochs: 500,
            lr_dyn: 1e-3,
            lr_g: 0.0005,
            lr_d: 0.0002,
            threshold: 0.5,
            penalty: -1.0,
            z_dim: 16,
            hidden: 64,
            batch: 32,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(WorldError::Config("threshold must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.hidden == 0 || self.z_dim == 0 {
            return Err(WorldError::Config(
                "batch, hidden and z_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Input row of the dynamics model: features, `t/H`, one-hot action.
pub fn dynamics_input(state: &StateTensor, action: Action, horizon: usize) -> Vec<f64> {
    let mut v = state.flat_input(horizon);
    v.extend_from_slice(&action.one_hot());
    v
}

/// Two dense ReLU networks sharing one input: next-state features and reward.
/// The state network predicts the change in features, added to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub state_net: Network,
    pub reward_net: Network,
    pub grid: GridSpec,
    pub task_id: usize,
}

impl DynamicsModel {
    pub fn new(grid: &GridSpec, task_id: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, 0xD0);
        let s = grid.state_len();
        let input = s + 1 + Action::COUNT;
        Self {
            state_net: Network::mlp(&[input, hidden, hidden, s], &mut rng),
            reward_net: Network::mlp(&[input, hidden, hidden, 1], &mut rng),
            grid: grid.clone(),
            task_id,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.grid.state_len() + 1 + Action::COUNT
    }

    fn batch_input(&self, rows: &[&Transition]) -> Tensor {
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|t| dynamics_input(&t.state, t.action, self.grid.horizon))
            .collect();
        Tensor::new(vec![rows.len(), self.input_dim()], data).expect("dynamics input shape")
    }

    fn targets(&self, rows: &[&Transition]) -> (Tensor, Tensor) {
        let s = self.grid.state_len();
        let delta: Vec<f64> = rows
            .iter()
            .flat_map(|t| {
                t.next_state
                    .features
                    .iter()
                    .zip(&t.state.features)
                    .map(|(n, c)| n - c)
            })
            .collect();
        let reward: Vec<f64> = rows.iter().map(|t| t.reward).collect();
        (
            Tensor::new(vec![rows.len(), s], delta).expect("delta shape"),
            Tensor::new(vec![rows.len(), 1], reward).expect("reward shape"),
        )
    }

    /// Predicted next-state features (clamped to `[0, 1]`) and reward.
    pub fn predict(
        &self,
        state: &StateTensor,
        action: Action,
    ) -> Result<(Vec<f64>, f64), WorldError> {
        let x = Tensor::new(
            vec![1, self.input_dim()],
            dynamics_input(state, action, self.grid.horizon),
        )?;
        let delta = self.state_net.predict(&x)?;
        let reward = self.reward_net.predict(&x)?.data()[0];
        let next = state
            .features
            .iter()
            .zip(delta.data())
            .map(|(c, d)| (c + d).clamp(0.0, 1.0))
            .collect();
        Ok((next, reward))
    }

    /// Held-out error: mean squared next-state error plus mean squared reward error.
    pub fn mse(&self, transitions: &[Transition]) -> Result<f64, WorldError> {
        let rows: Vec<&Transition> = transitions.iter().collect();
        let mut state_err = 0.0;
        let mut reward_err = 0.0;
        for chunk in rows.chunks(512) {
            let x = self.batch_input(chunk);
            let (dt, rt) = self.targets(chunk);
            let (ls, _) = loss::mse(&self.state_net.predict(&x)?, &dt)?;
            let (lr, _) = loss::mse(&self.reward_net.predict(&x)?, &rt)?;
            state_err += ls * chunk.len() as f64;
            reward_err += lr * chunk.len() as f64;
        }
        Ok((state_err + reward_err) / rows.len() as f64)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), WorldError> {
        nnkit::save_network(&self.state_net, &dir.join(format!("{stem}_state.json")))?;
        nnkit::save_network(&self.reward_net, &dir.join(format!("{stem}_reward.json")))?;
        Ok(())
    }

    pub fn load(
        dir: &Path,
        stem: &str,
        grid: &GridSpec,
        task_id: usize,
        hidden: usize,
    ) -> Result<Self, WorldError> {
        let mut m = Self::new(grid, task_id, hidden, 0);
        m.state_net =
            nnkit::load_network_like(&dir.join(format!("{stem}_state.json")), &m.state_net)?;
        m.reward_net =
            nnkit::load_network_like(&dir.join(format!("{stem}_reward.json")), &m.reward_net)?;
        Ok(m)
    }
}

/// Stateful minibatch trainer so training can pause at epoch checkpoints.
pub struct DynamicsTrainer {
    state_opt: Adam,
    reward_opt: Adam,
    rng: rng::Rng,
    batch: usize,
    /// Mean training loss of every completed epoch.
    pub loss_curve: Vec<f64>,
}

impl DynamicsTrainer {
    pub fn new(lr: f64, batch: usize, seed: u64) -> Self {
        Self {
            state_opt: Adam::new(lr),
            reward_opt: Adam::new(lr),
            rng: rng::derive(seed, 0xD1),
            batch,
            loss_curve: Vec::new(),
        }
    }

    pub fn run(
        &mut self,
        model: &mut DynamicsModel,
        transitions: &[Transition],
        epochs: usize,
    ) -> Result<(), WorldError> {
        if transitions.len() < self.batch {
            return Err(WorldError::Training(format!(
                "{} transitions is fewer than one batch of {}",
                transitions.len(),
                self.batch
            )));
        }
        let mut order: Vec<usize> = (0..transitions.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.batch) {
                let rows: Vec<&Transition> = chunk.iter().map(|&i| &transitions[i]).collect();
                let x = model.batch_input(&rows);
                let (dt, rt) = model.targets(&rows);
                let (ls, gs) = loss::mse(&model.state_net.forward(&x)?, &dt)?;
                model.state_net.backward(&gs)?;
                let (lr, gr) = loss::mse(&model.reward_net.forward(&x)?, &rt)?;
                model.reward_net.backward(&gr)?;
                let value = ls + lr;
                if !value.is_finite() {
                    return Err(WorldError::Training(format!(
                        "non-finite dynamics loss at epoch {}",
                        self.loss_curve.len()
                    )));
                }
                self.state_opt.step(&mut model.state_net)?;
                self.reward_opt.step(&mut model.reward_net)?;
                total += value;
                batches += 1;
            }
            self.loss_curve.push(total / batches as f64);
        }
        Ok(())
    }
}

/// Fits `model` by minimizing next-state plus reward squared error; returns
/// the per-epoch loss curve.
pub fn train_dynamics(
    model: &mut DynamicsModel,
    transitions: &[Transition],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, WorldError> {
    let mut trainer = DynamicsTrainer::new(lr, batch, seed);
    trainer.run(model, transitions, epochs)?;
    Ok(trainer.loss_curve)
}

/// Length of a transition vector `(s, a, s', r)`.
pub fn transition_dim(grid: &GridSpec) -> usize {
    2 * grid.state_len() + Action::COUNT + 1
}

/// `(s, action weights, s', r)` as one row; real transitions use one-hot actions.
pub fn transition_vector(state: &[f64], action: &[f64], next: &[f64], reward: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() * 2 + action.len() + 1);
    v.extend_from_slice(state);
    v.extend_from_slice(action);
    v.extend_from_slice(next);
    v.push(reward);
    v
}

pub fn real_vector(t: &Transition) -> Vec<f64> {
    transition_vector(
        &t.state.features,
        &t.action.one_hot(),
        &t.next_state.features,
        t.reward,
    )
}

/// Noise → transition vector. Feature blocks pass through a sigmoid, the
/// action block through a softmax; the reward stays linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: Network,
    pub grid: GridSpec,
    pub z_dim: usize,
}

impl Generator {
    pub fn new(grid: &GridSpec, z_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, 0x60);
        Self {
            net: Network::mlp(&[z_dim, hidden, hidden, transition_dim(grid)], &mut rng),
            grid: grid.clone(),
            z_dim,
        }
    }

    fn blocks(&self) -> (usize, usize, usize) {
        let s = self.grid.state_len();
        (s, s + Action::COUNT, 2 * s + Action::COUNT)
    }

    /// Applies the output heads to raw rows `[batch, dim]`.
    fn heads(&self, raw: &Tensor) -> Tensor {
        let (a0, a1, r) = self.blocks();
        let mut out = raw.clone();
        for row in out.data_mut().chunks_mut(r + 1) {
            for k in (0..a0).chain(a1..r) {
                row[k] = sigmoid(row[k]);
            }
            loss::softmax_in_place(&mut row[a0..a1]);
        }
        out
    }

    /// Chain rule through the heads given their outputs.
    fn heads_backward(&self, out: &Tensor, grad: &Tensor) -> Tensor {
        let (a0, a1, r) = self.blocks();
        let mut g = grad.clone();
        for (grow, orow) in g.data_mut().chunks_mut(r + 1).zip(out.data().chunks(r + 1)) {
            for k in (0..a0).chain(a1..r) {
                grow[k] *= orow[k] * (1.0 - orow[k]);
            }
            let dot: f64 = (a0..a1).map(|k| grow[k] * orow[k]).sum();
            for k in a0..a1 {
                grow[k] = orow[k] * (grow[k] - dot);
            }
        }
        g
    }

    pub fn noise(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..batch * self.z_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor::new(vec![batch, self.z_dim], data).expect("noise shape")
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Tensor, WorldError> {
        let raw = self.net.predict(&self.noise(batch, rng))?;
        Ok(self.heads(&raw))
    }
}

/// Transition vector → probability that it came from the data. The first
/// dense layer reads the vector followed by the feature change `s' − s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Network,
    pub grid: GridSpec,
}

impl Discriminator {
    pub fn new(grid: &GridSpec, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, 0xD5);
        let input = transition_dim(grid) + grid.state_len();
        let net = Network::mlp(&[input, hidden, hidden, 1], &mut rng);
        let mut layers = net.layers().to_vec();
        layers.push(Layer::Sigmoid);
        Self {
            net: Network::new(layers),
            grid: grid.clone(),
        }
    }

    /// Appends `s' − s` to every transition row.
    fn augment(&self, rows: &Tensor) -> Tensor {
        let s = self.grid.state_len();
        let dim = transition_dim(&self.grid);
        let mut data = Vec::with_capacity(rows.rows() * (dim + s));
        for row in rows.data().chunks(dim) {
            data.extend_from_slice(row);
            let next = &row[s + Action::COUNT..2 * s + Action::COUNT];
            data.extend(next.iter().zip(&row[..s]).map(|(b, a)| b - a));
        }
        Tensor::new(vec![rows.rows(), dim + s], data).expect("augmented shape")
    }

    /// Gradient w.r.t. the transition vector from the gradient w.r.t. the
    /// augmented input.
    fn augment_backward(&self, grad: &Tensor) -> Tensor {
        let s = self.grid.state_len();
        let dim = transition_dim(&self.grid);
        let mut data = Vec::with_capacity(grad.rows() * dim);
        for row in grad.data().chunks(dim + s) {
            let start = data.len();
            data.extend_from_slice(&row[..dim]);
            for k in 0..s {
                data[start + k] -= row[dim + k];
                data[start + s + Action::COUNT + k] += row[dim + k];
            }
        }
        Tensor::new(vec![grad.rows(), dim], data).expect("gradient shape")
    }

    fn forward(&mut self, rows: &Tensor) -> Result<Tensor, NnError> {
        let x = self.augment(rows);
        self.net.forward(&x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let g = self.net.backward(grad)?;
        Ok(self.augment_backward(&g))
    }

    /// Scores in the open interval `(0, 1)`.
    pub fn score_rows(&self, rows: &Tensor) -> Result<Vec<f64>, WorldError> {
        Ok(self
            .net
            .predict(&self.augment(rows))?
            .data()
            .iter()
            .map(|p| p.clamp(loss::PROB_EPS, 1.0 - loss::PROB_EPS))
            .collect())
    }

    pub fn score(&self, vector: &[f64]) -> Result<f64, WorldError> {
        let x = Tensor::new(vec![1, vector.len()], vector.to_vec())?;
        Ok(self.score_rows(&x)?[0])
    }

    pub fn score_transitions(&self, transitions: &[Transition]) -> Result<Vec<f64>, WorldError> {
        let mut out = Vec::with_capacity(transitions.len());
        for chunk in transitions.chunks(512) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(real_vector).collect();
            out.extend(self.score_rows(&Tensor::from_rows(&rows)?)?);
        }
        Ok(out)
    }
}

/// Per-epoch means of the adversarial objectives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanCurves {
    /// `E[log D(x)] + E[log(1 − D(G(z)))]`, the quantity D ascends.
    pub value: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
}

/// The minimax value `log D(x) + log(1 − D(G(z)))` for paired scores.
pub fn gan_value(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    let clamp = |p: f64| p.clamp(loss::PROB_EPS, 1.0 - loss::PROB_EPS);
    real_scores
        .iter()
        .zip(fake_scores)
        .map(|(r, f)| clamp(*r).ln() + (1.0 - clamp(*f)).ln())
        .sum::<f64>()
        / real_scores.len() as f64
}

/// Alternating training: one discriminator step on real-vs-generated, then one
/// generator step with the non-saturating loss `−log D(G(z))`.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    generator: &mut Generator,
    discriminator: &mut Discriminator,
    transitions: &[Transition],
    epochs: usize,
    batch: usize,
    lr_g: f64,
    lr_d: f64,
    seed: u64,
) -> Result<GanCurves, WorldError> {
    if transitions.len() < batch {
        return Err(WorldError::Training(format!(
            "{} transitions is fewer than one batch of {batch}",
            transitions.len()
        )));
    }
    let real: Vec<Vec<f64>> = transitions.iter().map(real_vector).collect();
    let dim = transition_dim(&generator.grid);
    let mut rng = rng::derive(seed, 0x6A);
    let mut opt_g = Adam::new(lr_g);
    let mut opt_d = Adam::new(lr_d);
    let mut curves = GanCurves::default();
    let mut order: Vec<usize> = (0..real.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut value, mut dl, mut gl, mut n) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            // discriminator step
            let fake = generator.sample(b, &mut rng)?;
            let mut data = Vec::with_capacity(2 * b * dim);
            for &i in chunk {
                data.extend_from_slice(&real[i]);
            }
            data.extend_from_slice(fake.data());
            let x = Tensor::new(vec![2 * b, dim], data)?;
            let labels = Tensor::new(
                vec![2 * b, 1],
                (0..2 * b).map(|k| if k < b { 1.0 } else { 0.0 }).collect(),
            )?;
            let scores = discriminator.forward(&x)?;
            let (d_loss, d_grad) = loss::bce(&scores, &labels)?;
            discriminator.backward(&d_grad)?;
            opt_d.step(&mut discriminator.net)?;
            let s = scores.data();
            value += gan_value(&s[..b], &s[b..]);

            // generator step
            let z = generator.noise(b, &mut rng);
            let raw = generator.net.forward(&z)?;
            let out = generator.heads(&raw);
            let d_out = discriminator.forward(&out)?;
            let (g_loss, g_grad) = loss::bce(&d_out, &Tensor::filled(vec![b, 1], 1.0))?;
            let d_input_grad = discriminator.backward(&g_grad)?;
            discriminator.net.zero_grad();
            let raw_grad = generator.heads_backward(&out, &d_input_grad);
            generator.net.backward(&raw_grad)?;
            opt_g.step(&mut generator.net)?;

            if !(d_loss.is_finite() && g_loss.is_finite()) {
                return Err(WorldError::Training(format!(
                    "non-finite GAN loss at epoch {epoch}"
                )));
            }
            dl += d_loss;
            gl += g_loss;
            n += 1;
        }
        curves.value.push(value / n as f64);
        curves.d_loss.push(dl / n as f64);
        curves.g_loss.push(gl / n as f64);
    }
    Ok(curves)
}

/// Real transitions whose next states (and rewards) are permuted across the
/// batch by a random cyclic shift, so no row keeps its own successor.
pub fn shuffle_next_states(transitions: &[Transition], rng: &mut impl Rng) -> Vec<Transition> {
    let mut out = transitions.to_vec();
    let n = out.len();
    if n < 2 {
        return out;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for k in 0..n {
        let donor = &transitions[order[(k + 1) % n]];
        let row = &mut out[order[k]];
        row.next_state = donor.next_state.clone();
        row.reward = donor.reward;
    }
    out
}

/// Probability that a random real row outscores a random corrupted row.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

/// Everything trained for one task: dynamics, generator and discriminator.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub dynamics: DynamicsModel,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldCurves {
    pub dynamics: Vec<f64>,
    pub gan: GanCurves,
}

impl WorldModel {
    pub fn untrained(grid: &GridSpec, task_id: usize, cfg: &WorldConfig) -> Self {
        Self {
            dynamics: DynamicsModel::new(grid, task_id, cfg.hidden, cfg.seed),
            generator: Generator::new(grid, cfg.z_dim, cfg.hidden, cfg.seed),
            discriminator: Discriminator::new(grid, cfg.hidden, cfg.seed),
        }
    }

    /// Trains the dynamics model and the GAN on one task's effective data.
    pub fn train(
        grid: &GridSpec,
        task_id: usize,
        transitions: &[Transition],
        cfg: &WorldConfig,
    ) -> Result<(Self, WorldCurves), WorldError> {
        cfg.validate()?;
        let mut model = Self::untrained(grid, task_id, cfg);
        let Self {
            dynamics: dyn_model,
            generator,
            discriminator,
        } = &mut model;
        let (dynamics, gan) = rayon::join(
            || {
                train_dynamics(
                    dyn_model,
                    transitions,
                    cfg.dyn_epochs,
                    cfg.batch,
                    cfg.lr_dyn,
                    cfg.seed,
                )
            },
            || {
                train_gan(
                    generator,
                    discriminator,
                    transitions,
                    cfg.gan_epochs,
                    cfg.batch,
                    cfg.lr_g,
                    cfg.lr_d,
                    cfg.seed,
                )
            },
        );
        let (dynamics, gan) = (dynamics?, gan?);
        Ok((model, WorldCurves { dynamics, gan }))
    }

    /// Writes `{stem}_state.json`, `{stem}_reward.json`, `{stem}_generator.json`
    /// and `{stem}_discriminator.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), WorldError> {
        self.dynamics.save(dir, stem)?;
        nnkit::save_network(
            &self.generator.net,
            &dir.join(format!("{stem}_generator.json")),
        )?;
        nnkit::save_network(
            &self.discriminator.net,
            &dir.join(format!("{stem}_discriminator.json")),
        )?;
        Ok(())
    }

    pub fn load(
        dir: &Path,
        stem: &str,
        grid: &GridSpec,
        task_id: usize,
        cfg: &WorldConfig,
    ) -> Result<Self, WorldError> {
        let mut model = Self::untrained(grid, task_id, cfg);
        model.dynamics = DynamicsModel::load(dir, stem, grid, task_id, cfg.hidden)?;
        model.generator.net = nnkit::load_network_like(
            &dir.join(format!("{stem}_generator.json")),
            &model.generator.net,
        )?;
        model.discriminator.net = nnkit::load_network_like(
            &dir.join(format!("{stem}_discriminator.json")),
            &model.discriminator.net,
        )?;
        Ok(model)
    }

    /// The gated MDP; `threshold = 0` gives the ungated ablation.
    pub fn robust_mdp(
        &self,
        threshold: f64,
        penalty: f64,
        discount: f64,
        pool: &[Transition],
    ) -> Result<RobustMdp, WorldError> {
        RobustMdp::new(
            self.dynamics.clone(),
            self.discriminator.clone(),
            threshold,
            penalty,
            discount,
            pool,
        )
    }
}

/// Learned MDP with the discriminator gate.
#[derive(Debug, Clone)]
pub struct RobustMdp {
    pub dynamics: DynamicsModel,
    pub detector: Discriminator,
    pub threshold: f64,
    pub penalty: f64,
    pub discount: f64,
    pool: Vec<StateTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub next: StateTensor,
    pub reward: f64,
    pub done: bool,
    /// Discriminator score of the predicted transition.
    pub score: f64,
    /// Whether the gate, rather than the action or horizon, ended the episode.
    pub halted: bool,
}

impl RobustMdp {
    pub fn new(
        dynamics: DynamicsModel,
        detector: Discriminator,
        threshold: f64,
        penalty: f64,
        discount: f64,
        pool: &[Transition],
    ) -> Result<Self, WorldError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(WorldError::Config("threshold must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(WorldError::Config("discount must lie in [0, 1)".into()));
        }
        if pool.is_empty() {
            return Err(WorldError::Config("initial-state pool is empty".into()));
        }
        Ok(Self {
            dynamics,
            detector,
            threshold,
            penalty,
            discount,
            pool: pool.iter().map(|t| t.state.clone()).collect(),
        })
    }

    /// The same model without the gate.
    pub fn ungated(&self) -> Self {
        Self {
            threshold: 0.0,
            ..self.clone()
        }
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.grid.horizon
    }

    pub fn pool(&self) -> &[StateTensor] {
        &self.pool
    }

    /// A uniformly drawn dataset state.
    pub fn reset(&self, rng: &mut impl Rng) -> StateTensor {
        self.pool[rng.random_range(0..self.pool.len())].clone()
    }

    /// Predicts `(s', r)`, then halts with the penalty when the discriminator
    /// scores the transition below the threshold.
    pub fn step(&self, state: &StateTensor, action: Action) -> Result<ModelStep, WorldError> {
        let (features, reward) = self.dynamics.predict(state, action)?;
        let grid = &self.dynamics.grid;
        let (next, natural_done) = if action == Action::Terminate {
            (state.clone(), true)
        } else {
            let t = state.t + 1;
            (
                StateTensor {
                    features,
                    t,
                    center: move_on_grid(grid, state.center, action),
                },
                t >= grid.horizon,
            )
        };
        let score = self.detector.score(&transition_vector(
            &state.features,
            &action.one_hot(),
            &next.features,
            reward,
        ))?;
        if score < self.threshold {
            return Ok(ModelStep {
                next,
                reward: self.penalty,
                done: true,
                score,
                halted: true,
            });
        }
        Ok(ModelStep {
            next,
            reward,
            done: natural_done,
            score,
            halted: false,
        })
    }
}
