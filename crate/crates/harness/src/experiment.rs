//! End-to-end runs and sample-size sweeps.

use std::path::Path;
use std::time::Instant;

use qpilab_core::design::{build_true_guess, guess_grid, Guess};
use qpilab_core::envs::{gen_linear_mdp, policy_sample, FeatureMap};
use qpilab_core::learner::{
    calibrate, enlarged_radius, quantile, solve, Calibration, LearnerConfig, SolveOutcome,
};
use qpilab_core::mdp::{collect_dataset, optimal_policy, Dataset, Policy, StagedMdp};
use qpilab_core::oracles::{concentrability, suboptimality, ConcReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BehaviorSpec, EnvSpec, ExperimentConfig};
use crate::error::{HarnessError, Result, StageContext};
use crate::io::{save_json, write_rows_csv, EnvFile};

/// Environment variable holding the worker count for replicate-level parallelism.
pub const WORKERS_ENV: &str = "QPILAB_WORKERS";

pub fn generate_env(spec: &EnvSpec) -> Result<EnvFile> {
    let (mdp, features) = gen_linear_mdp(
        spec.d,
        &spec.stage_sizes(),
        spec.num_actions,
        spec.reward_kind,
        spec.seed,
    )
    .stage("environment generation")?;
    Ok(EnvFile { mdp, features })
}

pub fn behavior_policy(mdp: &StagedMdp, spec: BehaviorSpec) -> Result<Policy> {
    let uniform = Policy::uniform(mdp);
    Ok(match spec {
        BehaviorSpec::Uniform => uniform,
        BehaviorSpec::EpsilonGreedy { mix } => {
            let (opt, _) = optimal_policy(mdp).stage("optimal policy")?;
            uniform.mix(&opt, mix)
        }
    })
}

/// Everything a replicate needs that does not depend on the data.
pub struct Setup {
    pub mdp: StagedMdp,
    pub features: FeatureMap,
    pub behavior: Policy,
    pub v_star: f64,
    pub conc: ConcReport,
    pub true_guess: Guess,
    /// Candidate guesses; index 0 is the true guess.
    pub grid: Vec<Guess>,
}

pub fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let EnvFile { mdp, features } = generate_env(&config.env)?;
    setup_for_env(config, mdp, features)
}

pub fn setup_for_env(
    config: &ExperimentConfig,
    mdp: StagedMdp,
    features: FeatureMap,
) -> Result<Setup> {
    let behavior = behavior_policy(&mdp, config.data.behavior)?;
    let (_, opt) = optimal_policy(&mdp).stage("optimal policy")?;
    let conc = concentrability(&mdp, &behavior).stage("concentrability")?;
    let g = &config.guesses;
    let (policies, _) = policy_sample(&mdp, g.policy_sample, g.policy_seed);
    let true_guess = build_true_guess(&mdp, &features, &policies).stage("true guess")?;
    let grid = guess_grid(&true_guess, g.spread, g.count, g.seed);
    Ok(Setup {
        v_star: opt.start_value(),
        mdp,
        features,
        behavior,
        conc,
        true_guess,
        grid,
    })
}

/// Learner configuration for sample size `n`, calibrating what the config leaves open.
pub fn learner_config_for(
    config: &ExperimentConfig,
    setup: &Setup,
    n: usize,
) -> Result<(LearnerConfig, Option<Calibration>)> {
    let spec = &config.learner;
    let base = spec.base_config(enlarged_radius(
        setup.true_guess.radius,
        setup.mdp.horizon,
        setup.features.d,
        spec.alpha,
    ));
    if !spec.needs_calibration() {
        return Ok((base, None));
    }
    let c = &spec.calibration;
    let cal = calibrate(
        &setup.mdp,
        &setup.features,
        &setup.behavior,
        &setup.true_guess,
        n,
        &base,
        c.replicates,
        c.delta,
        c.seed,
    )
    .stage("calibration")?;
    let cfg = LearnerConfig {
        beta: spec.beta.unwrap_or(cal.beta),
        eps_bar: spec.eps_bar.unwrap_or(cal.eps_bar),
        ..base
    };
    Ok((cfg, Some(cal)))
}

/// One replicate of one sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub n: usize,
    pub seed: u64,
    /// `v*(s_1) - v^pi'(s_1)`; empty when every guess was rejected.
    pub gap: Option<f64>,
    pub chosen_guess: Option<usize>,
    pub feasible_count: usize,
    pub tightness_max: f64,
    /// Zero unless wall-time recording is enabled.
    pub wall_ms: u64,
}

impl Row {
    pub const COLUMNS: [&'static str; 7] = [
        "n",
        "seed",
        "gap",
        "chosen_guess",
        "feasible_count",
        "tightness_max",
        "wall_ms",
    ];
}

pub fn run_on_dataset(
    setup: &Setup,
    cfg: &LearnerConfig,
    dataset: &Dataset,
) -> Result<SolveOutcome> {
    solve(dataset, &setup.grid, cfg, &setup.mdp, &setup.features).stage("solve")
}

pub fn run_replicate(
    setup: &Setup,
    cfg: &LearnerConfig,
    n: usize,
    seed: u64,
    record_wall_time: bool,
) -> Result<Row> {
    let start = Instant::now();
    let dataset = collect_dataset(&setup.mdp, &setup.features, &setup.behavior, n, seed)
        .stage("data collection")?;
    let out = run_on_dataset(setup, cfg, &dataset)?;
    let gap = match &out.policy {
        Some(p) => Some(suboptimality(&setup.mdp, p).stage("evaluation")?),
        None => None,
    };
    Ok(Row {
        n,
        seed,
        gap,
        chosen_guess: out.chosen_guess,
        feasible_count: out.feasible_count(),
        tightness_max: out.tightness_max(),
        wall_ms: if record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

/// Median and quartiles of the gaps at one sample size; a rejected replicate counts as an infinite gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub replicates: usize,
    pub rejected: usize,
    /// `None` when the statistic is infinite because of rejections.
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let gaps: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n)
                .map(|r| r.gap.unwrap_or(f64::INFINITY))
                .collect();
            let finite = |x: f64| x.is_finite().then_some(x);
            Aggregate {
                n,
                replicates: gaps.len(),
                rejected: gaps.iter().filter(|g| g.is_infinite()).count(),
                median: finite(median(&gaps)),
                q25: finite(quantile(&gaps, 0.25)),
                q75: finite(quantile(&gaps, 0.75)),
            }
        })
        .collect()
}

/// Midpoint median.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    // equal middles also covers two infinite ones
    if v.len() % 2 == 1 || v[m - 1] == v[m] {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub n: usize,
    pub beta: f64,
    pub eps_bar: f64,
    pub calibration: Option<Calibration>,
}

/// A sweep's rows, aggregates and the configuration that reproduces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub v_star: f64,
    /// `None` when the behavior policy leaves a reachable pair uncovered.
    pub c_conc: Option<f64>,
    pub calibrations: Vec<CalibrationRecord>,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
}

/// Worker count from the environment, else the number of logical CPUs.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// The full grid of sample sizes and replicates; replicate `r` uses data seed `data.seed + r`.
pub fn sweep(config: &ExperimentConfig) -> Result<ExperimentResult> {
    sweep_with_workers(config, worker_count())
}

pub fn sweep_with_workers(config: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    let setup = setup(config)?;
    with_workers(workers, || sweep_setup(config, &setup))?
}

fn sweep_setup(config: &ExperimentConfig, setup: &Setup) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    let mut calibrations = Vec::new();
    for n in config.sweep_ns() {
        let (cfg, cal) = learner_config_for(config, setup, n)?;
        calibrations.push(CalibrationRecord {
            n,
            beta: cfg.beta,
            eps_bar: cfg.eps_bar,
            calibration: cal,
        });
        let cell: Result<Vec<Row>> = (0..config.sweep.replicates as u64)
            .into_par_iter()
            .map(|r| {
                run_replicate(
                    setup,
                    &cfg,
                    n,
                    config.data.seed + r,
                    config.output.record_wall_time,
                )
            })
            .collect();
        rows.extend(cell?);
    }
    rows.sort_by_key(|r| (r.n, r.seed));
    Ok(ExperimentResult {
        config: config.clone(),
        v_star: setup.v_star,
        c_conc: setup.conc.c_conc.is_finite().then_some(setup.conc.c_conc),
        calibrations,
        aggregates: aggregate(&rows),
        rows,
    })
}

/// A single cell: sample size `data.n`, one replicate with seed `data.seed`.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut single = config.clone();
    single.sweep.ns = vec![config.data.n];
    single.sweep.replicates = 1;
    sweep(&single)
}

/// Writes `results.csv` (one row per replicate) and `result.json` (config echo, calibration, aggregates).
pub fn write_result(result: &ExperimentResult, dir: &Path) -> Result<()> {
    write_rows_csv(&result.rows, &dir.join("results.csv"))?;
    save_json(result, &dir.join("result.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_aggregate() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        let row = |n, seed, gap| Row {
            n,
            seed,
            gap,
            chosen_guess: None,
            feasible_count: 0,
            tightness_max: 0.0,
            wall_ms: 0,
        };
        let agg = aggregate(&[
            row(10, 0, Some(0.5)),
            row(10, 1, None),
            row(10, 2, Some(0.1)),
            row(5, 0, Some(1.0)),
        ]);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].n, 5);
        assert_eq!(agg[1].median, Some(0.5));
        assert_eq!(agg[1].rejected, 1);
        assert_eq!(agg[1].q75, None);
    }
}
