//! Experiment command line: system identification, policy training,
//! evaluation against the baselines, and controller-count sweeps.
//!
//! A typical session pipes one output directory through the stages:
//!
//! ```text
//! rloc sysid    --plant cartpole --seed 1 --out runs/cp
//! rloc train    --plant cartpole --seed 1 --out runs/cp
//! rloc evaluate --plant cartpole --seed 1 --out runs/cp --mode rloc
//! rloc evaluate --plant cartpole --seed 1 --out runs/cp --mode nnoc
//! rloc sweep    --plant cartpole --seed 1 --out runs/cp-sweep --trials 50
//! ```

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rloc_core::experiment::{
    self, EvalMode, EvalOptions, ExperimentConfig, SweepResult,
};

#[derive(Parser)]
#[command(
    name = "rloc",
    version,
    about = "Hierarchical switching-LQR control experiments on the two-link \
             arm and cart-pole benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration TOML. Omit to use built-in defaults for
    /// --plant.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plant name (arm | cartpole); required when --config is omitted.
    #[arg(long)]
    plant: Option<String>,
    /// Master seed; overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory read from and written to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect naive experience and fit local linear models.
    Sysid(Common),
    /// Synthesize LQR gains from the fitted models and train the switching
    /// policy.
    Train(Common),
    /// Roll a policy out from the evaluation start grid and report costs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy to evaluate: rloc, nnoc, lqr-target, or lqr-grid.
        #[arg(long, default_value = "rloc")]
        mode: String,
        /// Also dump every evaluation rollout as CSV.
        #[arg(long)]
        trajectories: bool,
        /// Also dump the controller-switch sequence of every rollout.
        #[arg(long)]
        action_sequences: bool,
        /// Also dump a value grid at this per-axis resolution (100 gives
        /// the desk-scale grid; larger values approach the dense map).
        #[arg(long)]
        value_grid: Option<usize>,
    },
    /// Grow the controller count over independently seeded trials and
    /// compare the learnt policy against nearest-centre switching.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Trial count; overrides the config value (useful for desk-scale
        /// runs, e.g. 50).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print the built-in default configuration for a plant as TOML.
    PrintConfig {
        /// Plant name (arm | cartpole).
        #[arg(long)]
        plant: String,
    },
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match (&common.config, &common.plant) {
        (Some(path), plant) => {
            let cfg = ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            if let Some(p) = plant {
                if *p != cfg.plant {
                    bail!(
                        "--plant {} contradicts the config file's plant '{}'",
                        p,
                        cfg.plant
                    );
                }
            }
            cfg
        }
        (None, Some(plant)) => ExperimentConfig::default_for(plant)?,
        (None, None) => bail!("pass --config <file> or --plant <arm|cartpole>"),
    };
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sysid(common) => cmd_sysid(&common),
        Command::Train(common) => cmd_train(&common),
        Command::Evaluate {
            common,
            mode,
            trajectories,
            action_sequences,
            value_grid,
        } => cmd_evaluate(
            &common,
            &mode,
            EvalOptions {
                trajectories,
                action_sequences,
                value_grid,
            },
        ),
        Command::Sweep { common, trials } => cmd_sweep(&common, trials),
        Command::PrintConfig { plant } => {
            print!("{}", ExperimentConfig::default_for(&plant)?.to_toml_string()?);
            Ok(())
        }
    }
}

fn cmd_sysid(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let art = experiment::run_sysid(&cfg, seed)?;
    experiment::write_sysid_outputs(&cfg, seed, &art, &common.out)?;
    println!(
        "sysid: {} rollouts ({} dropped), {} local models ({} without data) -> {}",
        art.experience.records.len(),
        art.experience.dropped,
        art.models.len(),
        art.segment_counts.iter().filter(|&&n| n == 0).count(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let models = experiment::load_models(&common.out).with_context(|| {
        format!(
            "loading models from {} (run `rloc sysid` first)",
            common.out.display()
        )
    })?;
    let trained = experiment::run_train(&cfg, &models, seed)?;
    experiment::write_train_outputs(&cfg, seed, &trained, &common.out)?;
    let converged = trained.bank.iter().filter(|c| c.converged).count();
    println!(
        "train: {} epochs over {} cells x {} actions ({}/{} gains converged) -> {}",
        cfg.rl.n_epochs,
        trained.fm.n_cells(),
        trained.bank.len(),
        converged,
        trained.bank.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, mode: &str, opts: EvalOptions) -> Result<()> {
    let cfg = resolve_config(common)?;
    let mode: EvalMode = mode.parse()?;
    let art = if mode == EvalMode::LqrGrid {
        let experience = experiment::load_experience(&common.out).with_context(|| {
            format!(
                "loading experience from {} (run `rloc sysid` first)",
                common.out.display()
            )
        })?;
        experiment::run_evaluate(&cfg, mode, None, Some(&experience), &opts)?
    } else {
        let (file, trained) = experiment::load_policy(&common.out).with_context(|| {
            format!(
                "loading policy from {} (run `rloc train` first)",
                common.out.display()
            )
        })?;
        if file.plant != cfg.plant {
            bail!(
                "policy was trained on '{}' but the config is for '{}'",
                file.plant,
                cfg.plant
            );
        }
        experiment::run_evaluate(&cfg, mode, Some(&trained), None, &opts)?
    };
    experiment::write_evaluate_outputs(&cfg, &art, &common.out)?;
    println!(
        "evaluate[{}]: mean cost {:.3} +/- {:.3}, {:.0}% of {} starts reached the target -> {}",
        mode,
        art.report.mean_cost,
        art.report.sem_cost,
        100.0 * art.report.success_rate,
        art.report.outcomes.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_sweep(common: &Common, trials: Option<usize>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let n_trials = trials.unwrap_or(cfg.rl.n_trials);
    let res = experiment::run_sweep(&cfg, seed, n_trials)?;
    experiment::write_sweep_outputs(&cfg, seed, &res, &common.out)?;
    print_sweep_table(&res);
    let failed = res.trials.iter().filter(|t| t.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed}/{n_trials} trials failed; see summary.json");
    }
    println!(
        "sweep: {} trials x n_a 1..={} -> {}",
        n_trials,
        cfg.rl.n_actions_max,
        common.out.display()
    );
    Ok(())
}

fn print_sweep_table(res: &SweepResult) {
    println!("n_a  rloc mean (sem)        nnoc mean (sem)        rloc wins");
    for a in &res.aggregates {
        println!(
            "{:>3}  {:>10.3} ({:>8.3})  {:>10.3} ({:>8.3})  {:>8.0}%",
            a.n_a,
            a.rloc_mean,
            a.rloc_sem,
            a.nnoc_mean,
            a.nnoc_sem,
            100.0 * a.rloc_win_rate
        );
    }
}
