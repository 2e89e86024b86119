use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use moda::contrastive::Strategy;
use moda::harness::{self, stages, HarnessError, PipelineConfig, ResultRow, Variant};

#[derive(Parser)]
#[command(
    name = "moda",
    version,
    about = "Contrastive data sharing and gated model-based offline RL on a synthetic grid city"
)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of `eval.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives single-worker mode.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the environment and write every task's behavior dataset.
    GenData,
    /// Mine triplets and train the sub-trajectory encoder per target.
    TrainContrastive {
        #[arg(long)]
        target: Option<usize>,
    },
    /// Build effective datasets.
    Share {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Train dynamics, generator and discriminator per target.
    TrainWorld {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Run SAC in the learned MDP.
    TrainPolicy {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Evaluate trained policies (or the behavior policies) in the environment.
    Evaluate {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        target: Option<usize>,
        /// Evaluate the data-generating behavior policies instead.
        #[arg(long)]
        behavior: bool,
    },
    /// Every stage end to end, then results.csv.
    Pipeline,
    /// Rerun the pipeline for each value of one config key.
    Sweep {
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// One of the packaged experiment designs.
    Experiment {
        #[arg(value_parser = ["profiles", "sharing", "counts"])]
        kind: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .downcast_ref::<HarnessError>()
                .map(HarnessError::category)
                .unwrap_or("usage");
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required");
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.eval.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn pick<T: Copy>(one: Option<T>, all: &[T]) -> Vec<T> {
    one.map(|v| vec![v]).unwrap_or_else(|| all.to_vec())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(&cli)?;
    let seeds = cfg.eval.seeds.clone();
    let targets = |t: Option<usize>| pick(t, &cfg.targets());
    match cli.command {
        Command::GenData => {
            for &seed in &seeds {
                let path = stages::gen_data(&cfg, seed)?;
                println!("{}", path.display());
            }
        }
        Command::TrainContrastive { target } => {
            for &seed in &seeds {
                for t in targets(target) {
                    println!("{}", stages::train_contrastive(&cfg, seed, t)?.display());
                }
            }
        }
        Command::Share { strategy, target } => {
            for &seed in &seeds {
                for t in targets(target) {
                    println!("{}", stages::share(&cfg, seed, t, strategy)?.display());
                }
            }
        }
        Command::TrainWorld { strategy, target } => {
            for &seed in &seeds {
                for t in targets(target) {
                    for s in pick(strategy, &cfg.pipeline.strategies) {
                        stages::train_world(&cfg, seed, t, s)?;
                    }
                }
            }
        }
        Command::TrainPolicy {
            strategy,
            variant,
            target,
        } => {
            for &seed in &seeds {
                for t in targets(target) {
                    for s in pick(strategy, &cfg.pipeline.strategies) {
                        for v in pick(variant, &cfg.pipeline.variants) {
                            println!("{}", stages::train_policy(&cfg, seed, t, s, v)?.display());
                        }
                    }
                }
            }
        }
        Command::Evaluate {
            strategy,
            variant,
            target,
            behavior,
        } => {
            if behavior {
                let mut text = String::from("task_id,seed,mean_return,std_return\n");
                for &seed in &seeds {
                    for (t, mean, std) in stages::evaluate_behaviors(&cfg, seed)? {
                        if target.is_none_or(|x| x == t) {
                            text.push_str(&format!("{t},{seed},{mean},{std}\n"));
                        }
                    }
                }
                std::fs::create_dir_all(&cfg.output.dir)?;
                let path = cfg.output.dir.join("behavior.csv");
                std::fs::write(&path, text)
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("{}", path.display());
            } else {
                let mut rows: Vec<ResultRow> = Vec::new();
                for &seed in &seeds {
                    for t in targets(target) {
                        for s in pick(strategy, &cfg.pipeline.strategies) {
                            for v in pick(variant, &cfg.pipeline.variants) {
                                rows.push(stages::evaluate(&cfg, seed, t, s, v)?);
                            }
                        }
                    }
                }
                stages::snapshot_config(&cfg)?;
                let path = cfg.output.dir.join("results.csv");
                harness::emit_results(&rows, &path)?;
                println!("{}", path.display());
            }
        }
        Command::Pipeline => {
            stages::pipeline(&cfg)?;
            println!("{}", cfg.output.dir.join("results.csv").display());
        }
        Command::Sweep { key, values } => {
            if values.is_empty() {
                bail!("--values needs at least one value");
            }
            let mut rows = Vec::new();
            for value in &values {
                let mut point = cfg.with_key(&key, value)?;
                point.output.dir = cfg.output.dir.join(format!("{key}={value}"));
                rows.extend(stages::pipeline(&point)?);
                point.output.dir = cfg.output.dir.clone();
                stages::snapshot_config(&point)?;
            }
            let path = cfg.output.dir.join("results.csv");
            harness::emit_results(&rows, &path)?;
            println!("{}", path.display());
        }
        Command::Experiment { kind } => {
            let rows = match kind.as_str() {
                "profiles" => harness::run_profile_comparison(&cfg)?,
                "sharing" => harness::run_sharing_comparison(&cfg)?,
                _ => harness::run_shared_count_sweep(&cfg)?,
            };
            stages::snapshot_config(&cfg)?;
            if kind == "counts" {
                for &c in &cfg.experiment.counts {
                    stages::snapshot_config(&harness::count_config(&cfg, c as usize))?;
                }
            }
            let path = cfg.output.dir.join(format!("{kind}.csv"));
            harness::emit_results(&rows, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
