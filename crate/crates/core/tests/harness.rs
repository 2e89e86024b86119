use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use moda::contrastive::Strategy;
use moda::harness::*;

const TINY: &str = r#"{
  "env": {
    "grid": {"rows": 8, "cols": 8, "patch": 3, "features": 5, "horizon": 16,
             "feature_names": ["traffic_volume", "travel_demand", "traffic_speed", "waiting_time", "poi_distance"]},
    "tasks": [
      {"id": 0, "weights": [0.237915475715, 0.793051585718, 0.396525792859, -0.317220634287, -0.237915475715], "expertise": 0.95, "terminate_bonus": 0.5},
      {"id": 1, "weights": [0.237915475715, 0.793051585718, 0.396525792859, -0.317220634287, -0.237915475715], "expertise": 0.5, "terminate_bonus": 0.5},
      {"id": 2, "weights": [0.237915475715, 0.793051585718, 0.396525792859, -0.317220634287, -0.237915475715], "expertise": 0.1, "terminate_bonus": 0.5}
    ],
    "step_cost": 0.05, "seed": 3
  },
  "data": {"trajectories": [12, 6, 12], "max_len": 16},
  "contrastive": {"epochs": 2, "channels": 4, "dim": 8},
  "world": {"dyn_epochs": 2, "gan_epochs": 2, "hidden": 8, "z_dim": 4},
  "sac": {"episodes": 6, "warmup": 20, "hidden": 8, "batch": 8, "buffer": 500},
  "eval": {"rollouts": 4, "seeds": [0]},
  "pipeline": {"targets": [0]},
  "experiment": {"profiles": {"expert": 0, "medium": 1, "random": 2}, "scarce_target": 1, "counts": [0, 20, 40, 80]}
}"#;

fn tiny(out: &Path) -> PipelineConfig {
    let mut cfg: PipelineConfig = serde_json::from_str(TINY).unwrap();
    cfg.output.dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn moda(config: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_moda"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: std::process::Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn row(task: usize, strategy: &str, seed: u64, mean: f64) -> ResultRow {
    ResultRow {
        task_id: task,
        strategy: strategy.into(),
        variant: "moda".into(),
        seed,
        mean_return: mean,
        std_return: 0.5,
        shared_transitions: 3,
        config_hash: "abc".into(),
    }
}

#[test]
fn validation_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let mut c = base.clone();
    c.eval.seeds.clear();
    assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    let mut c = base.clone();
    c.pipeline.targets = vec![7];
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.data.trajectories.pop();
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.experiment.counts = vec![10, -1];
    assert!(c.validate().is_err());
    assert!(base.with_key("world.threshold", "1.5").is_err());
    assert!(base.with_key("nope.key", "1").is_err());
}

#[test]
fn with_key_sets_nested_values() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let c = base.with_key("contrastive.lambda", "5").unwrap();
    assert_eq!(c.contrastive.lambda, 5);
    let c = base.with_key("world.threshold", "0.25").unwrap();
    assert_eq!(c.world.threshold, 0.25);
}

#[test]
fn hash_tracks_every_key_but_output() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    let h = base.hash();
    assert_eq!(h.len(), 16);
    for (key, value) in [
        ("contrastive.lambda", "4"),
        ("world.penalty", "-2.0"),
        ("sac.alpha", "0.1"),
        ("eval.rollouts", "7"),
        ("env.seed", "99"),
    ] {
        assert_ne!(base.with_key(key, value).unwrap().hash(), h, "{key}");
    }
    let mut moved = base.clone();
    moved.output.dir = dir.path().join("elsewhere");
    assert_eq!(moved.hash(), h);
}

#[test]
fn emit_results_is_sorted_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        row(1, "none", 0, 2.0),
        row(0, "uds", 1, 1.0),
        row(0, "all", 2, 0.25),
        row(0, "all", 0, 3.0),
    ];
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    emit_results(&rows, &a).unwrap();
    let mut reversed = rows.clone();
    reversed.reverse();
    emit_results(&reversed, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
    let back = read_results(&a).unwrap();
    let keys: Vec<(usize, String, u64)> = back
        .iter()
        .map(|r| (r.task_id, r.strategy.clone(), r.seed))
        .collect();
    assert_eq!(
        keys,
        vec![
            (0, "all".into(), 0),
            (0, "all".into(), 2),
            (0, "uds".into(), 1),
            (1, "none".into(), 0)
        ]
    );
    assert_eq!(back[0].mean_return, 3.0);
}

#[test]
fn emit_results_refuses_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    assert!(emit_results(&[], &path).is_err());
    assert!(!path.exists());
}

#[test]
fn best_count_prefers_smaller_on_ties() {
    let mut rows = Vec::new();
    for (count, mean) in [(0, 1.0), (500, 3.0), (1000, 3.0), (2000, 2.0)] {
        let mut r = row(0, "contrastive", 0, mean);
        r.shared_transitions = count;
        rows.push(r);
    }
    assert_eq!(best_count(&rows, 0), Some(500));
    assert_eq!(best_count(&rows, 4), None);
}

#[test]
fn experiment_runners_emit_expected_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.eval.seeds = vec![0, 1, 2];
    let profiles = run_profile_comparison(&cfg).unwrap();
    assert_eq!(profiles.len(), 18);
    let groups: BTreeSet<(usize, String)> = profiles
        .iter()
        .map(|r| (r.task_id, r.variant.clone()))
        .collect();
    assert_eq!(groups.len(), 6);
    for r in &profiles {
        assert!(r.std_return >= 0.0 && r.std_return.is_finite());
    }

    let sharing = run_sharing_comparison(&cfg).unwrap();
    assert_eq!(sharing.len(), 12);
    for seed in 0..3 {
        let count = |s: &str| {
            sharing
                .iter()
                .find(|r| r.seed == seed && r.strategy == s)
                .unwrap()
                .shared_transitions
        };
        assert_eq!(count("uds"), count("all"));
        assert_eq!(count("none"), 0);
    }

    let counts = run_shared_count_sweep(&cfg).unwrap();
    assert_eq!(counts.len(), 2 * 4 * 3);
    let groups: BTreeSet<usize> = counts.iter().map(|r| r.shared_transitions).collect();
    assert_eq!(groups, BTreeSet::from([0, 20, 40, 80]));
    let hashes: BTreeSet<&str> = counts.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), 4);

    // a zero count trains on exactly the no-sharing data
    let none = run_in_memory(&cfg, &[0, 2], &[Strategy::None], &[Variant::Moda]).unwrap();
    for r in counts.iter().filter(|r| r.shared_transitions == 0) {
        let twin = none
            .iter()
            .find(|n| n.task_id == r.task_id && n.seed == r.seed)
            .unwrap();
        assert_eq!(r.mean_return, twin.mean_return);
        assert_eq!(r.std_return, twin.std_return);
    }
}

#[test]
fn per_row_std_is_sample_std_of_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let env = environment(&cfg).unwrap();
    let task = &env.tasks[1];
    let policy = moda::gridsim::BehaviorPolicy { env: &env, task };
    let (mean, std) = env.evaluate_policy(&policy, task, 20, 8).unwrap();
    let returns = env.rollout_returns(&policy, task, 20, 8).unwrap();
    assert_eq!(returns.len(), 20);
    let n = returns.len() as f64;
    let m = returns.iter().sum::<f64>() / n;
    let s = (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - m).abs() < 1e-12);
    assert!((std - s).abs() < 1e-12);
    let (bm, bs) = evaluate_behavior(&cfg, &env, 1, 0).unwrap();
    assert!(bm.is_finite() && bs >= 0.0);
}

#[test]
fn cli_pipeline_writes_artifacts_and_traceable_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    ok(moda(&path, &["pipeline"]));
    let out = dir.path().join("out");
    let ws = out.join("seed_0");
    for f in [
        "dataset.jsonl",
        "contrastive_task0.json",
        "contrastive_task0_loss.csv",
        "effective_task0_contrastive.jsonl",
        "world_task0_contrastive_state.json",
        "world_task0_contrastive_reward.json",
        "world_task0_contrastive_generator.json",
        "world_task0_contrastive_discriminator.json",
        "world_task0_contrastive_dynamics_loss.csv",
        "world_task0_contrastive_gan_loss.csv",
        "actor_task0_contrastive_moda.json",
        "actor_task0_contrastive_moda_minus.json",
        "sac_task0_contrastive_moda_episodes.csv",
    ] {
        assert!(ws.join(f).exists(), "missing {f}");
    }
    let rows = read_results(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let snap = out.join("configs").join(format!("{}.json", r.config_hash));
        let back: PipelineConfig =
            serde_json::from_str(&fs::read_to_string(snap).unwrap()).unwrap();
        assert_eq!(back.hash(), r.config_hash);
    }
}

#[test]
fn cli_skips_contrastive_stage_for_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    ok(moda(&path, &["gen-data"]));
    ok(moda(&path, &["share", "--strategy", "none"]));
    ok(moda(&path, &["evaluate", "--behavior"]));
    let ws = dir.path().join("out/seed_0");
    assert!(ws.join("effective_task0_none.jsonl").exists());
    assert!(!ws.join("contrastive_task0.json").exists());
    let behavior = fs::read_to_string(dir.path().join("out/behavior.csv")).unwrap();
    assert_eq!(behavior.lines().count(), 2);
}

#[test]
fn cli_sweep_writes_one_group_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    ok(moda(
        &path,
        &[
            "sweep",
            "--key",
            "contrastive.lambda",
            "--values",
            "1,3,5,10",
        ],
    ));
    let rows = read_results(&dir.path().join("out/results.csv")).unwrap();
    let hashes: BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), 4);
    assert_eq!(rows.len(), 8);
    for h in hashes {
        assert!(dir.path().join(format!("out/configs/{h}.json")).exists());
    }
    assert!(dir
        .path()
        .join("out/contrastive.lambda=10/results.csv")
        .exists());
}

#[test]
fn cli_names_missing_artifact_and_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    let out = moda(&path, &["train-world", "--strategy", "none"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[missing-artifact]"), "{err}");
    assert!(err.contains("effective_task0_none.jsonl"), "{err}");
    assert!(err.contains("share"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_moda"))
        .args(["--config", "/nonexistent/cfg.json", "pipeline"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error[io]"));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stage_isolation_reproduces_downstream_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    ok(moda(&path, &["--workers", "1", "pipeline"]));
    let reference = read_tree(&dir.path().join("out"));
    let ws = dir.path().join("out/seed_0");

    fs::remove_file(ws.join("world_task0_contrastive_discriminator.json")).unwrap();
    fs::remove_file(ws.join("actor_task0_contrastive_moda.json")).unwrap();
    fs::remove_file(dir.path().join("out/results.csv")).unwrap();
    ok(moda(&path, &["train-world"]));
    ok(moda(&path, &["train-policy"]));
    ok(moda(&path, &["evaluate"]));
    assert_eq!(read_tree(&dir.path().join("out")), reference);

    fs::remove_file(ws.join("effective_task0_contrastive.jsonl")).unwrap();
    ok(moda(&path, &["share", "--strategy", "contrastive"]));
    assert_eq!(read_tree(&dir.path().join("out")), reference);
}

#[test]
fn single_worker_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("a"));
    cfg.eval.seeds = vec![0, 1];
    let path = write_config(dir.path(), &cfg);
    ok(moda(&path, &["--workers", "1", "pipeline"]));
    ok(moda(
        &path,
        &[
            "--workers",
            "1",
            "--out",
            dir.path().join("b").to_str().unwrap(),
            "pipeline",
        ],
    ));
    ok(moda(
        &path,
        &[
            "--workers",
            "2",
            "--out",
            dir.path().join("c").to_str().unwrap(),
            "pipeline",
        ],
    ));
    // config snapshots record their own output directory; only their names
    // (the hashes) are compared
    let artifacts = |name: &str| -> Vec<(String, Vec<u8>)> {
        read_tree(&dir.path().join(name))
            .into_iter()
            .map(|(p, bytes)| {
                if p.starts_with("configs/") {
                    (p, Vec::new())
                } else {
                    (p, bytes)
                }
            })
            .collect()
    };
    let a = artifacts("a");
    assert_eq!(a, artifacts("b"));
    assert_eq!(a, artifacts("c"));
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    ok(moda(&path, &["--seed", "5", "gen-data"]));
    assert!(dir.path().join("out/seed_5/dataset.jsonl").exists());
    assert!(!dir.path().join("out/seed_0").exists());
}

#[test]
fn bundled_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!cfg.targets().is_empty());
        seen += 1;
    }
    assert!(seen >= 4);
}
