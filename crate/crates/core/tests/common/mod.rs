#![allow(dead_code)]

use moda::nnkit::{Layer, Network, Tensor};
use rand::Rng;

/// Random small network (depth ≤ 3, width ≤ 16) with a matching input.
/// Even indices are dense stacks, odd indices start with a convolution.
pub fn random_network(index: u64) -> (Network, Tensor, Tensor) {
    let mut rng = moda::rng::seeded(1000 + index);
    let depth = rng.random_range(1..=3);
    let batch = rng.random_range(1..=3);
    let activations = [Layer::Relu, Layer::Tanh, Layer::Sigmoid];
    let mut layers = Vec::new();
    let input;
    if index.is_multiple_of(2) {
        let mut width = rng.random_range(2..=16);
        input = vec![batch, width];
        for d in 0..depth {
            let out = rng.random_range(1..=16);
            layers.push(Layer::dense(width, out, &mut rng));
            if d + 1 < depth {
                layers.push(activations[rng.random_range(0..3)].clone());
            }
            width = out;
        }
    } else {
        let channels = rng.random_range(1..=4);
        let side = rng.random_range(2..=5);
        input = vec![batch, channels, side, side];
        let mut c = channels;
        for _ in 0..depth.min(2) {
            let out = rng.random_range(1..=6);
            layers.push(Layer::conv(c, out, 3, &mut rng));
            layers.push(activations[rng.random_range(1..3)].clone());
            c = out;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::dense(c, rng.random_range(1..=16), &mut rng));
    }
    let net = Network::new(layers);
    let len: usize = input.iter().product();
    let x = Tensor::new(
        input,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let out_shape = net.predict(&x).unwrap().shape().to_vec();
    let olen: usize = out_shape.iter().product();
    let probe = Tensor::new(
        out_shape,
        (0..olen).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    (net, x, probe)
}

pub const WEIGHTS: [f64; 5] = [0.3, 1.0, 0.5, -0.4, -0.3];

pub fn small_grid() -> moda::gridsim::GridSpec {
    moda::gridsim::GridSpec {
        rows: 8,
        cols: 8,
        patch: 3,
        horizon: 16,
        ..moda::gridsim::GridSpec::default()
    }
}

/// Small environment whose tasks share `WEIGHTS` up to the given signs.
pub fn small_env(signs: &[f64], expertise: f64) -> moda::gridsim::GroundTruthEnv {
    let tasks = signs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let w: Vec<f64> = WEIGHTS.iter().map(|x| x * s).collect();
            moda::gridsim::TaskSpec::normalized(k, &w, expertise, 0.5 * s)
        })
        .collect();
    moda::gridsim::build_env(small_grid(), tasks, 0.05, 7).unwrap()
}

pub fn transitions(
    env: &moda::gridsim::GroundTruthEnv,
    task: usize,
    trajectories: usize,
    seed: u64,
) -> Vec<moda::datasets::Transition> {
    env.generate_trajectories(&env.tasks[task], trajectories, env.grid.horizon, seed)
        .unwrap()
        .into_iter()
        .flat_map(|t| t.transitions)
        .collect()
}
