use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qpilab::config::ExperimentConfig;
use qpilab::experiment::{self, Setup};
use qpilab::io::{load_dataset, load_env, load_json, save_dataset, save_json, EnvFile};
use qpilab::plot::{emit_plots, PlotOutcome};
use qpilab::verify::{verify, Suite};
use qpilab_core::learner::{Calibration, LearnerConfig, SolveOutcome};
use qpilab_core::mdp::collect_dataset;
use qpilab_core::oracles::suboptimality;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "qpilab",
    version,
    about = "Offline RL experiments under linear q-pi realizability"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured environment and write it as JSON.
    GenEnv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect a dataset with the configured behavior policy.
    Collect {
        #[command(flatten)]
        source: EnvSource,
        /// Overrides `data.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the learner on a dataset and write the solution.
    Learn {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact suboptimality of a learned policy.
    Eval {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Run every (n, replicate) cell and write results.csv and result.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run lemma suites; exits nonzero if any fails.
    Verify {
        /// Run every suite.
        #[arg(long, conflicts_with = "lemma")]
        all: bool,
        /// Suites to run (repeatable).
        #[arg(long, value_enum)]
        lemma: Vec<Suite>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include elapsed times in the report.
        #[arg(long)]
        timed: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize results.csv into gap_vs_n.csv and gap_vs_n.svg.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct EnvSource {
    #[arg(long)]
    config: PathBuf,
    /// Use a saved environment instead of generating one from the config.
    #[arg(long)]
    env: Option<PathBuf>,
}

impl EnvSource {
    fn load(&self) -> Result<(ExperimentConfig, EnvFile)> {
        let config = ExperimentConfig::load(&self.config)?;
        let env = match &self.env {
            Some(p) => load_env(p)?,
            None => experiment::generate_env(&config.env)?,
        };
        Ok((config, env))
    }
}

/// What `learn` writes: enough to re-run the solve and to evaluate its policy.
#[derive(Serialize, Deserialize)]
struct SolutionFile {
    config: ExperimentConfig,
    learner: LearnerConfig,
    calibration: Option<Calibration>,
    outcome: SolveOutcome,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenEnv { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env = experiment::generate_env(&cfg.env)?;
            save_json(&env, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Collect {
            source,
            n,
            seed,
            out,
        } => {
            let (cfg, env) = source.load()?;
            let behavior = experiment::behavior_policy(&env.mdp, cfg.data.behavior)?;
            let ds = collect_dataset(
                &env.mdp,
                &env.features,
                &behavior,
                n.unwrap_or(cfg.data.n),
                seed.unwrap_or(cfg.data.seed),
            )
            .context("data collection")?;
            save_dataset(&ds, &out)?;
            println!("wrote {} trajectories to {}", ds.len(), out.display());
        }
        Command::Learn { source, data, out } => {
            let (cfg, env) = source.load()?;
            let dataset = load_dataset(&data)?;
            let setup: Setup = experiment::setup_for_env(&cfg, env.mdp, env.features)?;
            let (learner, calibration) =
                experiment::learner_config_for(&cfg, &setup, dataset.len())?;
            let outcome = experiment::run_on_dataset(&setup, &learner, &dataset)?;
            match outcome.chosen_guess {
                Some(g) => println!(
                    "chose guess {g}; {} of {} guesses feasible",
                    outcome.feasible_count(),
                    setup.grid.len()
                ),
                None => println!("all {} guesses rejected", setup.grid.len()),
            }
            save_json(
                &SolutionFile {
                    config: cfg,
                    learner,
                    calibration,
                    outcome,
                },
                &out,
            )?;
        }
        Command::Eval { env, solution } => {
            let env = load_env(&env)?;
            let sol: SolutionFile = load_json(&solution)?;
            let Some(policy) = sol.outcome.policy else {
                bail!("the solution has no policy: every guess was rejected");
            };
            let gap = suboptimality(&env.mdp, &policy)?;
            println!("{}", serde_json::json!({ "gap": gap }));
        }
        Command::Sweep { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
            let result = experiment::sweep(&cfg)?;
            experiment::write_result(&result, &dir)?;
            for a in &result.aggregates {
                println!(
                    "n={} median gap={} rejected={}/{}",
                    a.n,
                    a.median.map_or("inf".to_owned(), |m| format!("{m:.4}")),
                    a.rejected,
                    a.replicates
                );
            }
        }
        Command::Verify {
            all,
            lemma,
            seed,
            timed,
            out,
        } => {
            let suites = if all || lemma.is_empty() {
                Suite::all()
            } else {
                lemma
            };
            let report = verify(&suites, seed, timed)?;
            for s in &report.suites {
                println!(
                    "{} {:<20} {} = {:.3e} (tolerance {:.0e}, {} cases)",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.suite.name(),
                    s.statistic,
                    s.value,
                    s.tolerance,
                    s.instances
                );
            }
            if let Some(p) = out {
                save_json(&report, &p)?;
            }
            if !report.all_passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { results, out_dir } => {
            let rows = qpilab::io::read_rows_csv(&results)?;
            match emit_plots(&rows, &out_dir)? {
                PlotOutcome::Written { csv, svg } => {
                    println!("wrote {} and {}", csv.display(), svg.display())
                }
                PlotOutcome::Skipped { warning } => eprintln!("warning: {warning}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
