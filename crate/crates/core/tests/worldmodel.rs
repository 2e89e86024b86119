mod common;

use common::{small_env, small_grid, transitions};
use moda::datasets::Transition;
use moda::gridsim::{Action, CellIndex, StateTensor};
use moda::nnkit::Tensor;
use moda::worldmodel::*;
use proptest::prelude::*;
use rand::Rng;

fn world_cfg() -> WorldConfig {
    WorldConfig {
        dyn_epochs: 20,
        gan_epochs: 20,
        hidden: 16,
        z_dim: 8,
        ..WorldConfig::default()
    }
}

/// Discriminator whose score is `p` for every input.
fn constant_detector(p: f64) -> Discriminator {
    let mut d = Discriminator::new(&small_grid(), 8, 0);
    let mut flat = vec![0.0; d.net.flat_params().len()];
    *flat.last_mut().unwrap() = (p / (1.0 - p)).ln();
    d.net.set_flat_params(&flat).unwrap();
    d
}

fn mdp_with(detector: Discriminator, threshold: f64, pool: &[Transition]) -> RobustMdp {
    let dynamics = DynamicsModel::new(&small_grid(), 0, 16, 3);
    RobustMdp::new(dynamics, detector, threshold, -1.0, 0.99, pool).unwrap()
}

/// Episode lengths under uniformly random actions, one rng per episode.
fn rollout_lengths(mdp: &RobustMdp, episodes: u64) -> Vec<usize> {
    (0..episodes)
        .map(|e| {
            let mut rng = moda::rng::seeded(500 + e);
            let mut s = mdp.reset(&mut rng);
            let mut len = 0;
            loop {
                let a = Action::from_index(rng.random_range(0..Action::COUNT)).unwrap();
                let out = mdp.step(&s, a).unwrap();
                len += 1;
                if out.done || len >= mdp.horizon() {
                    return len;
                }
                s = out.next;
            }
        })
        .collect()
}

#[test]
fn constant_environment_reward_is_learned() {
    let grid = small_grid();
    let mut rng = moda::rng::seeded(1);
    let mut make = |n: usize| -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let state = StateTensor {
                    features: (0..grid.state_len()).map(|_| rng.random::<f64>()).collect(),
                    t: rng.random_range(0..grid.horizon),
                    center: CellIndex::new(rng.random_range(1..=8), rng.random_range(1..=8)),
                };
                Transition {
                    next_state: state.clone(),
                    state,
                    action: Action::from_index(rng.random_range(0..Action::COUNT)).unwrap(),
                    reward: 0.3,
                    task_id: 0,
                }
            })
            .collect()
    };
    let train = make(256);
    let held_out = make(64);
    let mut model = DynamicsModel::new(&grid, 0, 32, 0);
    let curve = train_dynamics(&mut model, &train, 150, 32, 1e-3, 0).unwrap();
    assert!(curve.last().unwrap() < &curve[0]);
    for t in &held_out {
        let (_, r) = model.predict(&t.state, t.action).unwrap();
        assert!((r - 0.3).abs() < 0.01, "predicted {r}");
    }
}

#[test]
fn dynamics_training_descends_and_is_deterministic() {
    let env = small_env(&[1.0], 0.5);
    let data = transitions(&env, 0, 20, 0);
    let run = || {
        let mut m = DynamicsModel::new(&env.grid, 0, 16, 4);
        let curve = train_dynamics(&mut m, &data, 10, 32, 1e-3, 4).unwrap();
        (m, curve)
    };
    let (a, curve) = run();
    let (b, _) = run();
    assert!(curve.last().unwrap() < &curve[0]);
    assert_eq!(a.state_net.flat_params(), b.state_net.flat_params());
    assert_eq!(a.reward_net.flat_params(), b.reward_net.flat_params());
}

#[test]
fn too_few_transitions_is_an_error() {
    let env = small_env(&[1.0], 0.5);
    let data: Vec<Transition> = transitions(&env, 0, 1, 0).into_iter().take(5).collect();
    let mut m = DynamicsModel::new(&env.grid, 0, 8, 0);
    assert!(train_dynamics(&mut m, &data, 1, 32, 1e-3, 0).is_err());
}

#[test]
fn gan_training_is_deterministic() {
    let env = small_env(&[1.0], 0.5);
    let data = transitions(&env, 0, 10, 1);
    let run = || {
        let mut g = Generator::new(&env.grid, 8, 16, 2);
        let mut d = Discriminator::new(&env.grid, 16, 2);
        let curves = train_gan(&mut g, &mut d, &data, 5, 32, 5e-4, 2e-4, 2).unwrap();
        (g.net.flat_params(), d.net.flat_params(), curves.value)
    };
    assert_eq!(run(), run());
}

#[test]
fn untrained_half_discriminator_value() {
    let v = gan_value(&[0.5; 7], &[0.5; 7]);
    assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn discriminator_scores_are_open_unit_interval(seed in 0u64..1000, scale in 0.0f64..1e4) {
        let grid = small_grid();
        let d = Discriminator::new(&grid, 8, seed);
        let mut rng = moda::rng::seeded(seed);
        let dim = transition_dim(&grid);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        for s in d.score_rows(&Tensor::from_rows(&rows).unwrap()).unwrap() {
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}

#[test]
fn gate_definition() {
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 2, 0);
    let s = pool[0].state.clone();
    let pass = mdp_with(constant_detector(0.7), 0.5, &pool)
        .step(&s, Action::E)
        .unwrap();
    assert!(!pass.halted && !pass.done);
    assert!((pass.score - 0.7).abs() < 1e-12);
    let halt = mdp_with(constant_detector(0.3), 0.5, &pool)
        .step(&s, Action::E)
        .unwrap();
    assert!(halt.halted && halt.done);
    assert_eq!(halt.reward, -1.0);
}

#[test]
fn threshold_extremes() {
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 4, 0);
    let d = Discriminator::new(&env.grid, 8, 1);
    let always = mdp_with(d.clone(), 1.0, &pool);
    assert!(rollout_lengths(&always, 20).iter().all(|&l| l == 1));
    let never = mdp_with(d, 0.0, &pool);
    for (s, a) in pool.iter().take(30).map(|t| (&t.state, t.action)) {
        assert!(!never.step(s, a).unwrap().halted);
    }
}

#[test]
fn gate_is_monotone_in_threshold() {
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 10, 0);
    let mut g = Generator::new(&env.grid, 8, 16, 0);
    let mut d = Discriminator::new(&env.grid, 16, 0);
    train_gan(&mut g, &mut d, &pool, 10, 32, 5e-4, 2e-4, 0).unwrap();
    let mut previous: Option<Vec<usize>> = None;
    for threshold in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
        let lengths = rollout_lengths(&mdp_with(d.clone(), threshold, &pool), 30);
        if let Some(prev) = &previous {
            assert!(lengths.iter().zip(prev).all(|(now, before)| now <= before));
        }
        previous = Some(lengths);
    }
}

#[test]
fn zero_threshold_matches_bare_dynamics() {
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 4, 0);
    let mdp = mdp_with(Discriminator::new(&env.grid, 8, 5), 0.0, &pool);
    let mut gated_rng = moda::rng::seeded(9);
    let mut bare_rng = moda::rng::seeded(9);
    for _ in 0..10 {
        let mut s = mdp.reset(&mut gated_rng);
        let mut b = mdp.pool()[bare_rng.random_range(0..mdp.pool().len())].clone();
        assert_eq!(s, b);
        loop {
            let a = Action::from_index(gated_rng.random_range(0..Action::COUNT)).unwrap();
            assert_eq!(a.index(), bare_rng.random_range(0..Action::COUNT));
            let out = mdp.step(&s, a).unwrap();
            let (features, reward) = mdp.dynamics.predict(&b, a).unwrap();
            assert_eq!(out.reward, reward);
            if a == Action::Terminate {
                assert!(out.done);
                break;
            }
            assert_eq!(out.next.features, features);
            if out.done {
                assert_eq!(out.next.t, env.grid.horizon);
                break;
            }
            s = out.next;
            b = s.clone();
        }
    }
}

#[test]
fn reset_draws_pool_states() {
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 3, 0);
    let mdp = mdp_with(Discriminator::new(&env.grid, 8, 0), 0.5, &pool);
    let mut rng = moda::rng::seeded(0);
    for _ in 0..1000 {
        let s = mdp.reset(&mut rng);
        assert!(pool.iter().any(|t| t.state == s));
    }
    let single = mdp_with(Discriminator::new(&env.grid, 8, 0), 0.5, &pool[..1]);
    for _ in 0..20 {
        assert_eq!(single.reset(&mut rng), pool[0].state);
    }
    let (mut r1, mut r2) = (moda::rng::seeded(4), moda::rng::seeded(4));
    for _ in 0..50 {
        assert_eq!(mdp.reset(&mut r1), mdp.reset(&mut r2));
    }
}

#[test]
fn empty_pool_and_bad_threshold_are_config_errors() {
    let dynamics = DynamicsModel::new(&small_grid(), 0, 8, 0);
    let d = Discriminator::new(&small_grid(), 8, 0);
    let err = RobustMdp::new(dynamics.clone(), d.clone(), 0.5, -1.0, 0.9, &[]).unwrap_err();
    assert!(matches!(err, WorldError::Config(_)));
    let env = small_env(&[1.0], 0.5);
    let pool = transitions(&env, 0, 1, 0);
    assert!(RobustMdp::new(dynamics, d, 1.5, -1.0, 0.9, &pool).is_err());
}

#[test]
fn shuffled_corruption_keeps_inputs_and_moves_outcomes() {
    let env = small_env(&[1.0], 0.5);
    let data = transitions(&env, 0, 5, 0);
    let corrupt = shuffle_next_states(&data, &mut moda::rng::seeded(0));
    assert_eq!(corrupt.len(), data.len());
    let moved = data
        .iter()
        .zip(&corrupt)
        .filter(|(a, b)| a.next_state != b.next_state)
        .count();
    assert!(moved * 10 > data.len() * 9);
    for (a, b) in data.iter().zip(&corrupt) {
        assert_eq!((&a.state, a.action), (&b.state, b.action));
    }
}

#[test]
fn world_model_checkpoint_round_trip() {
    let env = small_env(&[1.0], 0.5);
    let data = transitions(&env, 0, 6, 0);
    let cfg = world_cfg();
    let (model, _) = WorldModel::train(&env.grid, 0, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "w").unwrap();
    let back = WorldModel::load(dir.path(), "w", &env.grid, 0, &cfg).unwrap();
    assert_eq!(
        back.dynamics.state_net.flat_params(),
        model.dynamics.state_net.flat_params()
    );
    assert_eq!(
        back.dynamics.reward_net.flat_params(),
        model.dynamics.reward_net.flat_params()
    );
    assert_eq!(
        back.generator.net.flat_params(),
        model.generator.net.flat_params()
    );
    assert_eq!(
        back.discriminator.net.flat_params(),
        model.discriminator.net.flat_params()
    );
    assert!(WorldModel::load(&dir.path().join("missing"), "w", &env.grid, 0, &cfg).is_err());
}
