//! Triplet-trained sub-trajectory embeddings and the variance-gated sharing
//! rule, plus the no-sharing / sharing-all / zero-reward-relabel baselines.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{EffectiveDataset, MultiTaskDataset, SubTrajectory};
use crate::gridsim::{Action, GridSpec};
use crate::nnkit::{self, loss, Adam, Layer, Network, NnError, Tensor};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error("mining error: {0}")]
    Mining(String),
    #[error("sharing error: {0}")]
    Sharing(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharingConfig {
    /// Transitions per sub-trajectory.
    pub w: usize,
    /// Largest start offset (in transitions) of a positive from its anchor.
    pub lambda: usize,
    pub margin: f64,
    /// Embedding dimension.
    pub dim: usize,
    /// Chebyshev radius (cells) for proximal negatives.
    pub rho: usize,
    pub sample_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Hidden channels of each convolution.
    pub channels: usize,
    pub seed: u64,
}

impl Default for SharingConfig {
    fn default() -> Self {
        Self {
            w: 3,
            lambda: 3,
            margin: 1.0,
            dim: 32,
            rho: 2,
            sample_fraction: 0.15,
            epochs: 500,
            batch: 32,
            lr: 1e-3,
            channels: 16,
            seed: 0,
        }
    }
}

impl SharingConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let bad = |m: &str| Err(ContrastiveError::Mining(m.to_string()));
        if self.w == 0 || self.lambda == 0 || self.dim == 0 || self.batch == 0 || self.channels == 0
        {
            return bad("w, lambda, dim, batch and channels must be positive");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return bad("margin must be non-negative");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Channels each transition contributes to an encoded window: state features,
/// a one-hot action plane per action, and a reward plane.
pub fn channels_per_transition(grid: &GridSpec) -> usize {
    grid.features + Action::COUNT + 1
}

/// Encodes a window as a `(w·(n + 11)) × l × l` tensor.
pub fn encode_subtrajectory(
    x: &SubTrajectory,
    grid: &GridSpec,
    w: usize,
) -> Result<Tensor, ContrastiveError> {
    let data = encode_flat(x, grid, w)?;
    let l = grid.patch;
    Ok(Tensor::new(
        vec![w * channels_per_transition(grid), l, l],
        data,
    )?)
}

fn encode_flat(x: &SubTrajectory, grid: &GridSpec, w: usize) -> Result<Vec<f64>, ContrastiveError> {
    if x.window() != w {
        return Err(ContrastiveError::Shape(format!(
            "window of {} transitions, encoder expects {w}",
            x.window()
        )));
    }
    let plane = grid.patch * grid.patch;
    let per = channels_per_transition(grid);
    let mut out = vec![0.0; w * per * plane];
    for (k, tr) in x.transitions.iter().enumerate() {
        if tr.state.features.len() != grid.state_len() {
            return Err(ContrastiveError::Shape(format!(
                "state with {} values, grid needs {}",
                tr.state.features.len(),
                grid.state_len()
            )));
        }
        let base = k * per * plane;
        out[base..base + grid.state_len()].copy_from_slice(&tr.state.features);
        let action_plane = base + (grid.features + tr.action.index()) * plane;
        out[action_plane..action_plane + plane].fill(1.0);
        let reward_plane = base + (grid.features + Action::COUNT) * plane;
        out[reward_plane..reward_plane + plane].fill(tr.reward);
    }
    Ok(out)
}

/// Four 3×3 convolutions with ReLU, global average pooling, then a dense
/// projection to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveNet {
    pub net: Network,
    pub grid: GridSpec,
    pub w: usize,
    pub dim: usize,
    /// Mean batch loss per epoch of the last training run.
    pub loss_curve: Vec<f64>,
}

impl ContrastiveNet {
    pub fn new(grid: &GridSpec, cfg: &SharingConfig) -> Self {
        let mut rng = rng::derive(cfg.seed, 0xC0);
        let input = cfg.w * channels_per_transition(grid);
        let c = cfg.channels;
        let layers = vec![
            Layer::conv(input, c, 3, &mut rng),
            Layer::Relu,
            Layer::conv(c, c, 3, &mut rng),
            Layer::Relu,
            Layer::conv(c, c, 3, &mut rng),
            Layer::Relu,
            Layer::conv(c, c, 3, &mut rng),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::dense(c, cfg.dim, &mut rng),
        ];
        Self {
            net: Network::new(layers),
            grid: grid.clone(),
            w: cfg.w,
            dim: cfg.dim,
            loss_curve: Vec::new(),
        }
    }

    fn batch_tensor(&self, windows: &[&SubTrajectory]) -> Result<Tensor, ContrastiveError> {
        let l = self.grid.patch;
        let mut data = Vec::new();
        for x in windows {
            data.extend(encode_flat(x, &self.grid, self.w)?);
        }
        Ok(Tensor::new(
            vec![
                windows.len(),
                self.w * channels_per_transition(&self.grid),
                l,
                l,
            ],
            data,
        )?)
    }

    /// Embeddings of `windows`, one row each.
    pub fn embed(&self, windows: &[&SubTrajectory]) -> Result<Vec<Vec<f64>>, ContrastiveError> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let y = self.net.predict(&self.batch_tensor(chunk)?)?;
            out.extend((0..y.rows()).map(|r| y.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContrastiveError> {
        Ok(nnkit::save_network(&self.net, path)?)
    }

    pub fn load(
        path: &Path,
        grid: &GridSpec,
        cfg: &SharingConfig,
    ) -> Result<Self, ContrastiveError> {
        let mut f = Self::new(grid, cfg);
        f.net = nnkit::load_network_like(path, &f.net)?;
        Ok(f)
    }
}

/// Indices into a [`TripletSet`]'s window pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub struct TripletSet {
    pub windows: Vec<SubTrajectory>,
    pub triplets: Vec<Triplet>,
    /// Anchor/positive pairs before subsampling.
    pub candidate_count: usize,
    pub target: usize,
}

impl TripletSet {
    pub fn roles(&self, t: &Triplet) -> (&SubTrajectory, &SubTrajectory, &SubTrajectory) {
        (
            &self.windows[t.anchor],
            &self.windows[t.positive],
            &self.windows[t.negative],
        )
    }
}

/// Mines triplets for target task `target`.
///
/// Anchors are every partition window of the target. Positives are windows of
/// the same trajectory starting 1..=λ transitions away. Negatives are other-task
/// partition windows starting within Chebyshev radius ρ and ±1 time slot of the
/// anchor's first state, or a uniformly random other-task window when none is
/// close. Anchor/positive pairs are kept with probability `sample_fraction`.
pub fn mine_triplets(
    dataset: &MultiTaskDataset,
    target: usize,
    cfg: &SharingConfig,
    rng: &mut impl Rng,
) -> Result<TripletSet, ContrastiveError> {
    cfg.validate()?;
    if target >= dataset.n_tasks() {
        return Err(ContrastiveError::Mining(format!(
            "unknown target task {target}"
        )));
    }
    let w = cfg.w;
    let mut windows: Vec<SubTrajectory> = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut anchor_count = 0;

    for (traj_id, tr) in dataset.tasks[target].iter().enumerate() {
        if tr.len() < w {
            continue;
        }
        // every start offset of this trajectory, aligned ones serve as anchors
        let base = windows.len();
        for s in 0..=tr.len() - w {
            windows.push(SubTrajectory {
                transitions: tr.transitions[s..s + w].to_vec(),
                task_id: target,
                trajectory_id: traj_id,
                start: s,
            });
        }
        let last = tr.len() - w;
        for s in (0..=last).step_by(w) {
            if s + w > tr.len() {
                break;
            }
            anchor_count += 1;
            let lo = s.saturating_sub(cfg.lambda);
            let hi = (s + cfg.lambda).min(last);
            for p in lo..=hi {
                if p != s {
                    pairs.push((base + s, base + p));
                }
            }
        }
    }
    if anchor_count == 0 {
        return Err(ContrastiveError::Mining(format!(
            "task {target} has no trajectory with at least {w} transitions"
        )));
    }

    let neg_start = windows.len();
    for task in (0..dataset.n_tasks()).filter(|&t| t != target) {
        windows.extend(dataset.windows(task, w));
    }
    if windows.len() == neg_start {
        return Err(ContrastiveError::Mining(
            "no other-task windows exist to serve as negatives".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(ContrastiveError::Mining(format!(
            "no anchor of task {target} has a positive within λ = {}",
            cfg.lambda
        )));
    }

    let mut by_time: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, x) in windows.iter().enumerate().skip(neg_start) {
        by_time.entry(x.first_state().t).or_default().push(k);
    }

    let candidate_count = pairs.len();
    let mut kept: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.sample_fraction)
        .collect();
    if kept.is_empty() {
        kept.push(pairs[rng.random_range(0..pairs.len())]);
    }

    let mut triplets = Vec::with_capacity(kept.len());
    for (anchor, positive) in kept {
        let a = windows[anchor].first_state();
        let mut close = Vec::new();
        for t in a.t.saturating_sub(1)..=a.t + 1 {
            if let Some(list) = by_time.get(&t) {
                close.extend(
                    list.iter().copied().filter(|&k| {
                        windows[k].first_state().center.chebyshev(&a.center) <= cfg.rho
                    }),
                );
            }
        }
        let negative = if close.is_empty() {
            rng.random_range(neg_start..windows.len())
        } else {
            close.sort_unstable();
            close[rng.random_range(0..close.len())]
        };
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(TripletSet {
        windows,
        triplets,
        candidate_count,
        target,
    })
}

/// Minimizes the batch-mean triplet hinge with Adam; records the per-epoch
/// mean loss in `f.loss_curve`.
pub fn train_contrastive(
    f: &mut ContrastiveNet,
    set: &TripletSet,
    cfg: &SharingConfig,
) -> Result<(), ContrastiveError> {
    if set.triplets.is_empty() {
        return Err(ContrastiveError::Training("no triplets to train on".into()));
    }
    let mut rng = rng::derive(cfg.seed, 0xC1);
    let mut adam = Adam::new(cfg.lr);
    // encode every referenced window once
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    for t in &set.triplets {
        for k in [t.anchor, t.positive, t.negative] {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(k) {
                e.insert(encode_flat(&set.windows[k], &f.grid, f.w)?);
            }
        }
    }
    let l = f.grid.patch;
    let in_ch = f.w * channels_per_transition(&f.grid);
    let mut order: Vec<usize> = (0..set.triplets.len()).collect();
    f.loss_curve.clear();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let mut data = Vec::with_capacity(3 * b * in_ch * l * l);
            for role in 0..3 {
                for &i in chunk {
                    let t = set.triplets[i];
                    let k = [t.anchor, t.positive, t.negative][role];
                    data.extend_from_slice(&cache[&k]);
                }
            }
            let x = Tensor::new(vec![3 * b, in_ch, l, l], data)?;
            let emb = f.net.forward(&x)?;
            let d = f.dim;
            let split =
                |r: usize| Tensor::new(vec![b, d], emb.data()[r * b * d..(r + 1) * b * d].to_vec());
            let (value, grads) =
                loss::triplet_hinge(&split(0)?, &split(1)?, &split(2)?, cfg.margin)?;
            if !value.is_finite() {
                return Err(ContrastiveError::Training(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let mut g = Vec::with_capacity(3 * b * d);
            g.extend_from_slice(grads.anchor.data());
            g.extend_from_slice(grads.positive.data());
            g.extend_from_slice(grads.negative.data());
            f.net.backward(&Tensor::new(vec![3 * b, d], g)?)?;
            adam.step(&mut f.net)
                .map_err(|e| ContrastiveError::Training(format!("epoch {epoch}: {e}")))?;
            total += value;
            batches += 1;
        }
        f.loss_curve.push(total / batches as f64);
    }
    Ok(())
}

/// Mean triplet hinge of `set` under `f` (no training).
pub fn triplet_loss(
    f: &ContrastiveNet,
    set: &TripletSet,
    margin: f64,
) -> Result<f64, ContrastiveError> {
    let (a, p, n) = role_embeddings(f, set)?;
    let mut total = 0.0;
    for k in 0..a.len() {
        total += (sq_dist(&a[k], &p[k]) - sq_dist(&a[k], &n[k]) + margin).max(0.0);
    }
    Ok(total / a.len() as f64)
}

/// Fraction of triplets with `‖a−p‖² + margin < ‖a−n‖²`.
pub fn triplet_satisfaction(
    f: &ContrastiveNet,
    set: &TripletSet,
    margin: f64,
) -> Result<f64, ContrastiveError> {
    let (a, p, n) = role_embeddings(f, set)?;
    let ok = (0..a.len())
        .filter(|&k| sq_dist(&a[k], &p[k]) + margin < sq_dist(&a[k], &n[k]))
        .count();
    Ok(ok as f64 / a.len() as f64)
}

type Embeddings = Vec<Vec<f64>>;

fn role_embeddings(
    f: &ContrastiveNet,
    set: &TripletSet,
) -> Result<(Embeddings, Embeddings, Embeddings), ContrastiveError> {
    let pick = |role: usize| -> Vec<&SubTrajectory> {
        set.triplets
            .iter()
            .map(|t| &set.windows[[t.anchor, t.positive, t.negative][role]])
            .collect()
    };
    Ok((f.embed(&pick(0))?, f.embed(&pick(1))?, f.embed(&pick(2))?))
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Anchor statistics of the sharing gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStats {
    pub mean: Vec<f64>,
    /// Scalar total variance `(1/m) Σ ‖f(x_a) − μ‖²`.
    pub variance: f64,
}

pub fn anchor_stats(anchors: &[Vec<f64>]) -> Result<AnchorStats, ContrastiveError> {
    let m = anchors.len();
    if m < 2 {
        return Err(ContrastiveError::Sharing(format!(
            "need at least 2 anchors for a variance, got {m}"
        )));
    }
    let d = anchors[0].len();
    let mut mean = vec![0.0; d];
    for a in anchors {
        for (mu, v) in mean.iter_mut().zip(a) {
            *mu += v;
        }
    }
    for mu in &mut mean {
        *mu /= m as f64;
    }
    let variance = anchors.iter().map(|a| sq_dist(a, &mean)).sum::<f64>() / m as f64;
    Ok(AnchorStats { mean, variance })
}

/// The sharing gate: a candidate is shared iff `‖μ − f(x)‖² < σ²`.
pub fn share_mask(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
) -> Result<Vec<bool>, ContrastiveError> {
    let stats = anchor_stats(anchors)?;
    Ok(candidates
        .iter()
        .map(|c| sq_dist(&stats.mean, c) < stats.variance)
        .collect())
}

/// Builds `D_i^eff` from the trained encoder and the variance gate.
pub fn share(
    f: &ContrastiveNet,
    dataset: &MultiTaskDataset,
    target: usize,
) -> Result<EffectiveDataset, ContrastiveError> {
    let own = dataset.windows(target, f.w);
    let anchors = f.embed(&own.iter().collect::<Vec<_>>())?;
    let candidates: Vec<SubTrajectory> = (0..dataset.n_tasks())
        .filter(|&t| t != target)
        .flat_map(|t| dataset.windows(t, f.w))
        .collect();
    let shared = if candidates.is_empty() {
        anchor_stats(&anchors)?;
        Vec::new()
    } else {
        let emb = f.embed(&candidates.iter().collect::<Vec<_>>())?;
        let mask = share_mask(&anchors, &emb)?;
        candidates
            .into_iter()
            .zip(mask)
            .filter_map(|(x, keep)| keep.then_some(x))
            .collect()
    };
    Ok(EffectiveDataset {
        target,
        window: f.w,
        own,
        shared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Contrastive,
    None,
    All,
    Uds,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Contrastive => "contrastive",
            Strategy::None => "none",
            Strategy::All => "all",
            Strategy::Uds => "uds",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contrastive" => Ok(Strategy::Contrastive),
            "none" | "no_sharing" => Ok(Strategy::None),
            "all" | "sharing_all" => Ok(Strategy::All),
            "uds" => Ok(Strategy::Uds),
            other => Err(format!("unknown sharing strategy {other:?}")),
        }
    }
}

/// Baselines: `None` keeps `D_i`; `All` adds every other task's windows;
/// `Uds` adds them with every reward set to zero.
pub fn share_baseline(
    kind: Strategy,
    dataset: &MultiTaskDataset,
    target: usize,
    w: usize,
) -> Result<EffectiveDataset, ContrastiveError> {
    let own = dataset.windows(target, w);
    let others = || {
        (0..dataset.n_tasks())
            .filter(move |&t| t != target)
            .flat_map(move |t| dataset.windows(t, w))
    };
    let shared = match kind {
        Strategy::None => Vec::new(),
        Strategy::All => others().collect(),
        Strategy::Uds => others()
            .map(|mut x| {
                for tr in &mut x.transitions {
                    tr.reward = 0.0;
                }
                x
            })
            .collect(),
        Strategy::Contrastive => {
            return Err(ContrastiveError::Sharing(
                "contrastive sharing needs a trained encoder; use share()".into(),
            ))
        }
    };
    Ok(EffectiveDataset {
        target,
        window: w,
        own,
        shared,
    })
}
