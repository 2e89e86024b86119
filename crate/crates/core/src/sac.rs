//! Discrete-action soft actor-critic with twin Q-vector critics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gridsim::{Action, GroundTruthEnv, Policy, StateTensor, TaskSpec};
use crate::nnkit::{self, loss, Adam, Network, NnError, Tensor};
use crate::rng;
use crate::worldmodel::{RobustMdp, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error("training error: {0}")]
    Training(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub episodes: usize,
    pub batch: usize,
    pub discount: f64,
    /// Soft-update coefficient for the target critics.
    pub tau: f64,
    /// Entropy coefficient.
    pub alpha: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub buffer: usize,
    pub warmup: usize,
    pub hidden: usize,
    pub twin: bool,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            batch: 64,
            discount: 0.99,
            tau: 0.005,
            alpha: 0.2,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            buffer: 300_000,
            warmup: 1000,
            hidden: 64,
            twin: true,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(SacError::Config("discount must lie in [0, 1)".into()));
        }
        if self.alpha < 0.0 {
            return Err(SacError::Config(
                "entropy coefficient must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SacError::Config("tau must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.buffer < self.batch || self.hidden == 0 {
            return Err(SacError::Config(
                "batch must be positive and fit in the buffer".into(),
            ));
        }
        Ok(())
    }
}

/// Episodic environment with the grid's state and action spaces.
pub trait Mdp {
    fn reset(&self, rng: &mut rng::Rng) -> StateTensor;
    fn step(
        &self,
        state: &StateTensor,
        action: Action,
    ) -> Result<(StateTensor, f64, bool), SacError>;
    fn horizon(&self) -> usize;
}

impl Mdp for RobustMdp {
    fn reset(&self, rng: &mut rng::Rng) -> StateTensor {
        RobustMdp::reset(self, rng)
    }

    fn step(
        &self,
        state: &StateTensor,
        action: Action,
    ) -> Result<(StateTensor, f64, bool), SacError> {
        let out = RobustMdp::step(self, state, action)?;
        Ok((out.next, out.reward, out.done))
    }

    fn horizon(&self) -> usize {
        RobustMdp::horizon(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next: Vec<f64>,
    pub done: bool,
}

/// The ground-truth environment seen through the [`Mdp`] interface, with
/// episodes starting at slot 0 from a uniformly random cell.
pub struct EnvMdp<'a> {
    pub env: &'a GroundTruthEnv,
    pub task: &'a TaskSpec,
}

impl Mdp for EnvMdp<'_> {
    fn reset(&self, rng: &mut rng::Rng) -> StateTensor {
        self.env.random_start(rng)
    }

    fn step(
        &self,
        state: &StateTensor,
        action: Action,
    ) -> Result<(StateTensor, f64, bool), SacError> {
        let (next, out) = self
            .env
            .step(state, action, self.task)
            .map_err(|e| SacError::Training(e.to_string()))?;
        Ok((next, out.reward, out.done))
    }

    fn horizon(&self) -> usize {
        self.env.grid.horizon
    }
}

/// Fixed-capacity ring buffer; the oldest entry is overwritten when full.
///
/// Sampling walks a random permutation of the stored slots, reshuffled after
/// each full pass or whenever the size changes. Every draw is uniform over
/// the stored items and a full pass returns each item exactly once.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Experience>,
    capacity: usize,
    head: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            head: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn get(&self, index: usize) -> &Experience {
        &self.items[index]
    }

    pub fn sample_indices(&mut self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.cursor >= self.order.len() || self.order.len() != self.items.len() {
                    self.order = (0..self.items.len()).collect();
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: Network,
    pub horizon: usize,
}

impl Actor {
    pub fn new(state_len: usize, hidden: usize, horizon: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: Network::mlp(&[state_len + 1, hidden, hidden, Action::COUNT], rng),
            horizon,
        }
    }

    pub fn logits(&self, state: &StateTensor) -> Result<Vec<f64>, NnError> {
        let input = state.flat_input(self.horizon);
        let x = Tensor::new(vec![1, input.len()], input)?;
        Ok(self.net.predict(&x)?.into_data())
    }

    pub fn probabilities(&self, state: &StateTensor) -> Result<Vec<f64>, NnError> {
        let mut p = self.logits(state)?;
        loss::softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        nnkit::save_network(&self.net, path)
    }

    pub fn load(
        path: &Path,
        state_len: usize,
        hidden: usize,
        horizon: usize,
    ) -> Result<Self, NnError> {
        let template = Self::new(state_len, hidden, horizon, &mut rng::seeded(0));
        Ok(Self {
            net: nnkit::load_network_like(path, &template.net)?,
            horizon,
        })
    }
}

/// Argmax (lowest index on ties) or a categorical draw from `softmax(logits)`.
pub fn select_from_logits(logits: &[f64], rng: &mut impl Rng, deterministic: bool) -> Action {
    let index = if deterministic {
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    } else {
        let mut p = logits.to_vec();
        loss::softmax_in_place(&mut p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = p.len() - 1;
        for (k, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                chosen = k;
                break;
            }
        }
        chosen
    };
    Action::from_index(index).expect("logit count matches the action set")
}

pub fn select_action(
    actor: &Actor,
    state: &StateTensor,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<Action, NnError> {
    Ok(select_from_logits(
        &actor.logits(state)?,
        rng,
        deterministic,
    ))
}

/// The actor wrapped for evaluation in the ground-truth environment.
#[derive(Debug, Clone)]
pub struct SacPolicy {
    pub actor: Actor,
    pub deterministic: bool,
}

impl Policy for SacPolicy {
    fn act(&self, state: &StateTensor, rng: &mut rng::Rng) -> Action {
        let logits = self
            .actor
            .logits(state)
            .expect("actor input matches the grid");
        select_from_logits(&logits, rng, self.deterministic)
    }
}

#[derive(Debug, Clone)]
pub struct Critics {
    pub q1: Network,
    pub q2: Network,
    pub target1: Network,
    pub target2: Network,
    pub twin: bool,
}

impl Critics {
    pub fn new(state_len: usize, hidden: usize, twin: bool, rng: &mut impl Rng) -> Self {
        let q1 = Network::mlp(&[state_len + 1, hidden, hidden, Action::COUNT], rng);
        let q2 = Network::mlp(&[state_len + 1, hidden, hidden, Action::COUNT], rng);
        Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
            twin,
        }
    }

    fn min_of(&self, a: &Tensor, b: &Tensor) -> Tensor {
        if self.twin {
            a.zip_with(b, f64::min).expect("twin critic shapes agree")
        } else {
            a.clone()
        }
    }
}

/// Learners plus their optimizers.
pub struct SacAgent {
    pub actor: Actor,
    pub critics: Critics,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    pub cfg: SacConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
}

impl SacAgent {
    pub fn new(state_len: usize, horizon: usize, cfg: &SacConfig) -> Result<Self, SacError> {
        cfg.validate()?;
        let mut rng = rng::derive(cfg.seed, 0x5AC);
        Ok(Self {
            actor: Actor::new(state_len, cfg.hidden, horizon, &mut rng),
            critics: Critics::new(state_len, cfg.hidden, cfg.twin, &mut rng),
            actor_opt: Adam::new(cfg.lr_actor),
            q1_opt: Adam::new(cfg.lr_critic),
            q2_opt: Adam::new(cfg.lr_critic),
            cfg: cfg.clone(),
        })
    }

    /// Soft Bellman targets for the sampled rows.
    pub fn critic_targets(&self, batch: &[&Experience]) -> Result<Vec<f64>, SacError> {
        let next = Tensor::from_rows(&batch.iter().map(|e| e.next.clone()).collect::<Vec<_>>())?;
        let logits = self.actor.net.predict(&next)?;
        let probs = loss::softmax_rows(&logits);
        let logp = loss::log_softmax_rows(&logits);
        let t1 = self.critics.target1.predict(&next)?;
        let t2 = self.critics.target2.predict(&next)?;
        let qmin = self.critics.min_of(&t1, &t2);
        let k = Action::COUNT;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, e)| {
                if e.done {
                    return e.reward;
                }
                let v: f64 = (0..k)
                    .map(|a| {
                        let i = b * k + a;
                        probs.data()[i] * (qmin.data()[i] - self.cfg.alpha * logp.data()[i])
                    })
                    .sum();
                e.reward + self.cfg.discount * v
            })
            .collect())
    }

    fn critic_step(
        net: &mut Network,
        opt: &mut Adam,
        x: &Tensor,
        actions: &[usize],
        y: &[f64],
    ) -> Result<f64, SacError> {
        let q = net.forward(x)?;
        let k = Action::COUNT;
        let b = actions.len() as f64;
        let mut grad = Tensor::zeros(q.shape().to_vec());
        let mut total = 0.0;
        for (row, (&a, &target)) in actions.iter().zip(y).enumerate() {
            let diff = q.data()[row * k + a] - target;
            total += diff * diff;
            grad.data_mut()[row * k + a] = 2.0 * diff / b;
        }
        net.backward(&grad)?;
        opt.step(net)?;
        Ok(total / b)
    }

    /// One gradient step for each critic and the actor, then the target blend.
    pub fn update(
        &mut self,
        buffer: &mut ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<UpdateStats, SacError> {
        if buffer.len() < self.cfg.batch {
            return Err(SacError::Training(format!(
                "buffer holds {} < batch {}",
                buffer.len(),
                self.cfg.batch
            )));
        }
        let batch: Vec<&Experience> = buffer
            .sample_indices(self.cfg.batch, rng)
            .into_iter()
            .map(|i| buffer.get(i))
            .collect();
        self.update_on(&batch)
    }

    pub fn update_on(&mut self, batch: &[&Experience]) -> Result<UpdateStats, SacError> {
        let y = self.critic_targets(batch)?;
        let x = Tensor::from_rows(&batch.iter().map(|e| e.state.clone()).collect::<Vec<_>>())?;
        let actions: Vec<usize> = batch.iter().map(|e| e.action).collect();
        let mut critic_loss =
            Self::critic_step(&mut self.critics.q1, &mut self.q1_opt, &x, &actions, &y)?;
        if self.critics.twin {
            critic_loss +=
                Self::critic_step(&mut self.critics.q2, &mut self.q2_opt, &x, &actions, &y)?;
            critic_loss /= 2.0;
        }

        let q1 = self.critics.q1.predict(&x)?;
        let q2 = self.critics.q2.predict(&x)?;
        let qmin = self.critics.min_of(&q1, &q2);
        let logits = self.actor.net.forward(&x)?;
        let probs = loss::softmax_rows(&logits);
        let logp = loss::log_softmax_rows(&logits);
        let k = Action::COUNT;
        let b = batch.len() as f64;
        let mut grad = Tensor::zeros(logits.shape().to_vec());
        let (mut actor_loss, mut entropy) = (0.0, 0.0);
        for row in 0..batch.len() {
            let range = row * k..(row + 1) * k;
            let p = &probs.data()[range.clone()];
            let lp = &logp.data()[range.clone()];
            let f: Vec<f64> = lp
                .iter()
                .zip(&qmin.data()[range.clone()])
                .map(|(l, q)| self.cfg.alpha * l - q)
                .collect();
            let mean_f: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
            actor_loss += mean_f;
            entropy -= p.iter().zip(lp).map(|(a, b)| a * b).sum::<f64>();
            for a in 0..k {
                grad.data_mut()[row * k + a] = p[a] * (f[a] - mean_f) / b;
            }
        }
        let (actor_loss, entropy) = (actor_loss / b, entropy / b);
        if !(critic_loss.is_finite() && actor_loss.is_finite()) {
            return Err(SacError::Training("non-finite SAC loss".into()));
        }
        self.actor.net.backward(&grad)?;
        self.actor_opt.step(&mut self.actor.net)?;

        self.critics
            .target1
            .blend_from(&self.critics.q1, self.cfg.tau)?;
        if self.critics.twin {
            self.critics
                .target2
                .blend_from(&self.critics.q2, self.cfg.tau)?;
        }
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            entropy,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Mean update statistics per episode (episodes before warmup ends are skipped).
    pub critic_loss: Vec<f64>,
    pub actor_loss: Vec<f64>,
    pub entropy: Vec<f64>,
    pub updates: usize,
}

/// Runs SAC in `mdp`: uniform-random actions until `warmup` steps are stored,
/// then one update per environment step.
pub fn train_policy<M: Mdp>(
    mdp: &M,
    state_len: usize,
    cfg: &SacConfig,
) -> Result<(Actor, TrainingLog), SacError> {
    let mut agent = SacAgent::new(state_len, mdp.horizon(), cfg)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer);
    let mut rng = rng::derive(cfg.seed, 0x5AD);
    let mut log = TrainingLog::default();
    let horizon = mdp.horizon();
    let mut steps = 0usize;
    for _ in 0..cfg.episodes {
        let mut state = mdp.reset(&mut rng);
        let (mut ret, mut len) = (0.0, 0);
        let (mut cl, mut al, mut en, mut n) = (0.0, 0.0, 0.0, 0);
        loop {
            let action = if steps < cfg.warmup {
                Action::from_index(rng.random_range(0..Action::COUNT)).expect("index in range")
            } else {
                select_action(&agent.actor, &state, &mut rng, false)?
            };
            let (next, reward, done) = mdp.step(&state, action)?;
            buffer.push(Experience {
                state: state.flat_input(horizon),
                action: action.index(),
                reward,
                next: next.flat_input(horizon),
                done,
            });
            steps += 1;
            ret += reward;
            len += 1;
            if steps >= cfg.warmup && buffer.len() >= cfg.batch {
                let s = agent.update(&mut buffer, &mut rng)?;
                cl += s.critic_loss;
                al += s.actor_loss;
                en += s.entropy;
                n += 1;
            }
            state = next;
            if done || len >= horizon {
                break;
            }
        }
        log.episode_returns.push(ret);
        log.episode_lengths.push(len);
        if n > 0 {
            log.critic_loss.push(cl / n as f64);
            log.actor_loss.push(al / n as f64);
            log.entropy.push(en / n as f64);
            log.updates += n;
        }
    }
    Ok((agent.actor, log))
}
