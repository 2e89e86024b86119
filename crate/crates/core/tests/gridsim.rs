use moda::gridsim::*;
use proptest::prelude::*;
use rand::Rng;

const W: [f64; 5] = [0.3, 1.0, 0.5, -0.4, -0.3];

fn tiers(bonus: f64) -> Vec<TaskSpec> {
    vec![
        TaskSpec::normalized(0, &W, 0.95, bonus),
        TaskSpec::normalized(1, &W, 0.5, bonus),
        TaskSpec::normalized(2, &W, 0.1, bonus),
    ]
}

fn env(seed: u64) -> GroundTruthEnv {
    build_env(GridSpec::default(), tiers(0.5), 0.05, seed).unwrap()
}

#[test]
fn field_shape_and_range() {
    let e = env(7);
    assert_eq!(e.field_shape(), [48, 5, 12, 12]);
    assert_eq!(e.field().len(), 48 * 5 * 12 * 12);
    assert!(e.field().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn field_is_deterministic_in_seed() {
    assert_eq!(env(7).field(), env(7).field());
    assert_ne!(env(7).field(), env(8).field());
}

#[test]
fn poi_channel_is_time_invariant() {
    let e = env(3);
    for t in 1..48 {
        for i in 1..=12 {
            for j in 1..=12 {
                let c = CellIndex::new(i, j);
                assert_eq!(e.value(t, 4, c), e.value(0, 4, c));
            }
        }
    }
}

#[test]
fn build_rejects_bad_inputs() {
    let bad_grid = GridSpec {
        patch: 2,
        ..GridSpec::default()
    };
    assert!(matches!(
        build_env(bad_grid, tiers(0.5), 0.05, 0),
        Err(GridError::Config(_))
    ));
    assert!(build_env(GridSpec::default(), vec![], 0.05, 0).is_err());
    let mut t = tiers(0.5);
    t[1].weights[0] = 5.0;
    assert!(build_env(GridSpec::default(), t, 0.05, 0).is_err());
}

#[test]
fn interior_patch_center_equals_field() {
    let e = env(1);
    let half = 2;
    for t in [0, 17, 47] {
        for i in 3..=10 {
            for j in 3..=10 {
                let s = e.observe(t, CellIndex::new(i, j));
                for c in 0..5 {
                    assert_eq!(
                        s.features[(c * 5 + half) * 5 + half],
                        e.value(t, c, CellIndex::new(i, j))
                    );
                }
            }
        }
    }
}

#[test]
fn off_grid_patch_cells_are_zero() {
    let e = env(1);
    let s = e.observe(0, CellIndex::new(1, 1));
    for c in 0..5 {
        for k in 0..5 {
            assert_eq!(s.features[(c * 5) * 5 + k], 0.0, "top rows");
            assert_eq!(s.features[(c * 5 + k) * 5], 0.0, "left cols");
        }
    }
}

#[test]
fn clamp_closure_over_every_cell_and_action() {
    let e = env(0);
    for i in 1..=12 {
        for j in 1..=12 {
            for a in Action::ALL {
                let n = e.move_center(CellIndex::new(i, j), a);
                assert!((1..=12).contains(&n.i) && (1..=12).contains(&n.j));
            }
        }
    }
}

#[test]
fn uniform_branch_passes_chi_square() {
    let e = env(2);
    let mut task = e.tasks[0].clone();
    task.expertise = 0.0;
    let s = e.observe(5, CellIndex::new(6, 6));
    let mut rng = moda::rng::seeded(99);
    let mut counts = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        counts[e.behavior_action(&s, &task, &mut rng).index()] += 1;
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of χ² with 9 degrees of freedom
    assert!(chi2 < 21.666, "chi2 = {chi2}");
}

#[test]
fn expert_branch_frequencies() {
    let e = env(2);
    let s = e.observe(5, CellIndex::new(6, 6));
    let mut rng = moda::rng::seeded(4);
    let mut task = e.tasks[0].clone();
    task.expertise = 1.0;
    let greedy = e.greedy_action(&s, &task);
    assert!((0..200).all(|_| e.behavior_action(&s, &task, &mut rng) == greedy));

    task.expertise = 0.95;
    let hits = (0..10_000)
        .filter(|_| e.behavior_action(&s, &task, &mut rng) == greedy)
        .count();
    let freq = hits as f64 / 10_000.0;
    assert!((0.94..=0.97).contains(&freq), "greedy frequency {freq}");
}

#[test]
fn greedy_ties_go_to_the_lowest_index() {
    // A flat field makes every in-grid move equally rewarding.
    let grid = GridSpec {
        rows: 3,
        cols: 3,
        patch: 1,
        features: 1,
        horizon: 4,
        feature_names: vec!["x".into()],
    };
    let task = TaskSpec::normalized(0, &[0.0], 1.0, 0.0);
    let task = TaskSpec {
        weights: vec![1.0],
        ..task
    };
    let e = build_env(grid, vec![task.clone()], 0.0, 0).unwrap();
    let s = e.observe(0, CellIndex::new(2, 2));
    let r = e.one_step_rewards(&s, &task);
    let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = r.iter().position(|&v| v == best).unwrap();
    assert_eq!(e.greedy_action(&s, &task).index(), first);
}

#[test]
fn trajectories_respect_bounds_and_seed() {
    let e = env(5);
    let a = e.generate_trajectories(&e.tasks[1], 50, 48, 11).unwrap();
    assert_eq!(a.len(), 50);
    for tr in &a {
        assert!((1..=48).contains(&tr.len()));
        tr.validate().unwrap();
        assert_eq!(tr.transitions[0].state.t, 0);
    }
    assert_eq!(a, e.generate_trajectories(&e.tasks[1], 50, 48, 11).unwrap());
    let short = e.generate_trajectories(&e.tasks[0], 10, 4, 11).unwrap();
    assert!(short.iter().all(|t| t.len() <= 4));
}

fn mean_return(e: &GroundTruthEnv, task: usize, seed: u64) -> f64 {
    let trajs = e
        .generate_trajectories(&e.tasks[task], 60, 48, seed)
        .unwrap();
    trajs.iter().map(|t| t.total_reward()).sum::<f64>() / trajs.len() as f64
}

#[test]
fn expertise_orders_returns() {
    let mut totals = [0.0; 3];
    for seed in 0..3 {
        let e = env(seed);
        for (k, total) in totals.iter_mut().enumerate() {
            *total += mean_return(&e, k, 100 + seed) / 3.0;
        }
    }
    assert!(totals[0] > totals[2], "{totals:?}");
    assert!(
        totals[0] >= totals[1] && totals[1] >= totals[2],
        "{totals:?}"
    );
}

#[test]
fn always_terminate_returns_the_average_bonus() {
    let e = env(6);
    let task = &e.tasks[0];
    let returns = e
        .rollout_returns(&ConstantPolicy(Action::Terminate), task, 4000, 1)
        .unwrap();
    let mut closed = 0.0;
    for i in 1..=12 {
        for j in 1..=12 {
            closed += task.terminate_bonus * e.value(0, 1, CellIndex::new(i, j));
        }
    }
    closed /= 144.0;
    let (mean, std) = mean_std(&returns);
    assert!(
        (mean - closed).abs() < 4.0 * std / (returns.len() as f64).sqrt(),
        "{mean} vs {closed}"
    );
    let (_, single) = e
        .evaluate_policy(&ConstantPolicy(Action::Terminate), task, 1, 3)
        .unwrap();
    assert_eq!(single, 0.0);
}

#[test]
fn behavior_evaluation_agrees_with_its_trajectories() {
    let e = env(4);
    let task = &e.tasks[1];
    let (eval_mean, eval_std) = e
        .evaluate_policy(&BehaviorPolicy { env: &e, task }, task, 400, 21)
        .unwrap();
    let data = mean_return(&e, 1, 22);
    assert!(
        (eval_mean - data).abs() < 2.0 * eval_std,
        "{eval_mean} vs {data}"
    );
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let e = env(4);
    let task = &e.tasks[1];
    let policy = BehaviorPolicy { env: &e, task };
    let parallel = e.evaluate_policy(&policy, task, 64, 5).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let serial = pool.install(|| e.evaluate_policy(&policy, task, 64, 5).unwrap());
    assert_eq!(parallel, serial);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rewards_are_bounded(seed in 0u64..1000, i in 1usize..=12, j in 1usize..=12, t in 0usize..48, a in 0usize..10) {
        let e = env(seed % 4);
        let mut rng = moda::rng::seeded(seed);
        let task = &e.tasks[rng.random_range(0..3)];
        let (_, out) = e.step(&e.observe(t, CellIndex::new(i, j)), Action::ALL[a], task).unwrap();
        let bound = 1.0 * 5f64.sqrt() + e.step_cost + task.terminate_bonus;
        prop_assert!(out.reward.abs() <= bound);
    }
}
