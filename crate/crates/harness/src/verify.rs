//! Lemma suites behind `qpilab verify`.

use std::time::Instant;

use clap::ValueEnum;
use nalgebra::{DMatrix, DVector};
use qpilab_core::design::build_true_guess;
use qpilab_core::envs::{gen_linear_mdp, random_policies, FeatureMap};
use qpilab_core::learner::{clipped_v, lstsq_anchor, LearnerConfig};
use qpilab_core::linalg::to_dvec;
use qpilab_core::mdp::{collect_dataset, occupancy, Policy, RewardKind, StagedMdp};
use qpilab_core::oracles::{
    check_elliptical_potential, check_lsq_decomposition, check_perf_diff, check_projection_bound,
    check_range_bound, check_skip_realizability, concentrability, concentrability_brute_force,
    LemmaReport, SLACK_TOL,
};
use qpilab_core::skipping::{skip_target, SkipParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StageContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    LsqDecomposition,
    EllipticalPotential,
    ProjectionBound,
    PerfDiff,
    Occupancy,
    Anchor,
    SkipRealizability,
    RangeBound,
    Concentrability,
}

impl Suite {
    pub fn all() -> Vec<Suite> {
        Suite::value_variants().to_vec()
    }

    pub fn name(self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub description: String,
    /// `"worst slack"` (pass when at least `-tolerance`) or `"max residual"` (pass when at most `tolerance`).
    pub statistic: String,
    pub value: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub passed: bool,
    /// Elapsed time; excluded from reports unless requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub all_passed: bool,
}

fn slack_report(suite: Suite, description: &str, rep: LemmaReport) -> SuiteReport {
    SuiteReport {
        suite,
        description: description.into(),
        statistic: "worst slack".into(),
        value: rep.worst_slack,
        tolerance: SLACK_TOL,
        instances: rep.draws,
        passed: rep.passed(),
        elapsed_ms: None,
    }
}

fn residual_report(
    suite: Suite,
    description: &str,
    value: f64,
    tolerance: f64,
    instances: usize,
) -> SuiteReport {
    SuiteReport {
        suite,
        description: description.into(),
        statistic: "max residual".into(),
        value,
        tolerance,
        instances,
        passed: value <= tolerance,
        elapsed_ms: None,
    }
}

/// Random exact linear MDP with `d <= max_d`, horizon in `2..=max_h`, interior
/// stages of `1..=max_width` states and `2..=max_actions` actions.
pub fn random_instance(
    seed: u64,
    max_d: usize,
    max_h: usize,
    max_width: usize,
    max_actions: usize,
) -> Result<(StagedMdp, FeatureMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=max_d);
    let horizon = rng.random_range(2..=max_h);
    let sizes: Vec<usize> = (0..=horizon)
        .map(|k| {
            if k == 0 || k == horizon {
                1
            } else {
                rng.random_range(1..=max_width)
            }
        })
        .collect();
    let actions = rng.random_range(2..=max_actions.max(2));
    gen_linear_mdp(
        d,
        &sizes,
        actions,
        RewardKind::DeterministicMean,
        rng.random(),
    )
    .stage("instance generation")
}

/// Instances for the exhaustive skip-target and range checks.
pub fn small_linear_instances(seed: u64, count: usize) -> Result<Vec<(StagedMdp, FeatureMap)>> {
    (0..count as u64)
        .map(|i| random_instance(seed.wrapping_add(i), 3, 4, 5, 3))
        .collect()
}

fn perf_diff_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let (mdp, _) = random_instance(seed ^ (0xD1FF << 8) ^ i, 4, 5, 5, 4)?;
        let pols = random_policies(&mdp, 2, seed.wrapping_add(i));
        worst =
            worst.max(check_perf_diff(&mdp, &pols[0], &pols[1]).stage("performance difference")?);
    }
    Ok(residual_report(
        Suite::PerfDiff,
        "performance-difference identity on 50 random (MDP, pi, pi-bar) triples",
        worst,
        1e-10,
        50,
    ))
}

fn occupancy_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let (mdp, _) = random_instance(seed ^ (0x0CC0 << 8) ^ i, 4, 5, 5, 4)?;
        let pi = random_policies(&mdp, 1, seed.wrapping_add(i))[0].clone();
        let nu = occupancy(&mdp, &pi).stage("occupancy")?;
        for k in 0..mdp.horizon {
            worst = worst.max((nu.stage_total(k) - 1.0).abs());
        }
    }
    Ok(residual_report(
        Suite::Occupancy,
        "per-stage occupancy mass minus one on 50 random policies",
        worst,
        1e-10,
        50,
    ))
}

/// Ridge solution from explicitly assembled normal equations and tabular skip targets.
fn reference_anchor(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    dataset: &qpilab_core::mdp::Dataset,
    guess: &qpilab_core::design::Guess,
    h: usize,
    tail: &[Vec<f64>],
    cfg: &LearnerConfig,
) -> Result<DVector<f64>> {
    let params = cfg.skip_params(fm.d).stage("anchor check")?;
    let f: Vec<Vec<f64>> = (0..=mdp.horizon)
        .map(|k| {
            (0..mdp.stage_sizes[k])
                .map(|s| {
                    if k <= h || k == mdp.horizon {
                        0.0
                    } else {
                        clipped_v(&tail[k - h - 1], fm, k, s)
                    }
                })
                .collect()
        })
        .collect();
    let mut gram = DMatrix::identity(fm.d, fm.d) * cfg.lambda;
    let mut rhs = DVector::zeros(fm.d);
    for t in &dataset.trajectories {
        let x = to_dvec(fm.get(h, t.steps[h].state, t.steps[h].action));
        let y = skip_target(guess, fm, t, h, &f, &params).stage("anchor check")?;
        gram += &x * x.transpose();
        rhs += x * y;
    }
    Ok(gram.lu().solve(&rhs).expect("ridge system is nonsingular"))
}

fn anchor_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for i in 0..10u64 {
        let (mdp, fm) = random_instance(seed ^ (0xA11C << 8) ^ i, 3, 4, 4, 3)?;
        let pols = random_policies(&mdp, 40, i);
        let guess = build_true_guess(&mdp, &fm, &pols).stage("true guess")?;
        let behavior = Policy::uniform(&mdp);
        let ds = collect_dataset(&mdp, &fm, &behavior, 200, seed.wrapping_add(i))
            .stage("data collection")?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let cfg = LearnerConfig {
            lambda: rng.random_range(0.1..2.0),
            alpha: rng.random_range(0.05..1.0),
            ..LearnerConfig::default()
        };
        for h in 0..mdp.horizon {
            let mut tail: Vec<Vec<f64>> = (h + 1..mdp.horizon)
                .map(|_| (0..fm.d).map(|_| rng.random_range(-1.0..3.0)).collect())
                .collect();
            tail.push(vec![0.0; fm.d]);
            let fast = lstsq_anchor(&ds, h, &guess, &tail, &cfg).stage("anchor")?;
            let reference = reference_anchor(&mdp, &fm, &ds, &guess, h, &tail, &cfg)?;
            worst = worst.max((to_dvec(&fast) - reference).amax());
            count += 1;
        }
    }
    Ok(residual_report(
        Suite::Anchor,
        "anchor solve versus an independent normal-equation ridge solve",
        worst,
        1e-10,
        count,
    ))
}

fn skip_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, (mdp, fm)) in small_linear_instances(seed, 20)?.into_iter().enumerate() {
        let pols = random_policies(&mdp, 200, i as u64);
        let guess = build_true_guess(&mdp, &fm, &pols).stage("true guess")?;
        let behavior = Policy::uniform(&mdp);
        let params = SkipParams::new(0.3, fm.d).stage("skip parameters")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..fm.d)
                .map(|_| rng.random_range(-2.0..(mdp.horizon as f64 + 1.0)))
                .collect();
            let f: Vec<Vec<f64>> = (0..=mdp.horizon)
                .map(|k| {
                    (0..mdp.stage_sizes[k])
                        .map(|s| {
                            if k == mdp.horizon {
                                0.0
                            } else {
                                clipped_v(&theta, &fm, k, s)
                            }
                        })
                        .collect()
                })
                .collect();
            for h in 0..mdp.horizon {
                let rep = check_skip_realizability(&mdp, &fm, &guess, &behavior, &f, h, &params)
                    .stage("skip realizability")?;
                worst = worst.max(rep.sup_residual);
                count += 1;
            }
        }
    }
    Ok(residual_report(
        Suite::SkipRealizability,
        "exhaustive skip targets with f = clipped linear values are linear (20 exact instances x 5 parameters)",
        worst,
        1e-6,
        count,
    ))
}

fn range_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst = f64::INFINITY;
    let mut states = 0;
    for (i, (mdp, fm)) in small_linear_instances(seed, 20)?.into_iter().enumerate() {
        let pols = random_policies(&mdp, 200, i as u64);
        let guess = build_true_guess(&mdp, &fm, &pols).stage("true guess")?;
        let rep = check_range_bound(&mdp, &fm, &guess, &pols).stage("range bound")?;
        worst = worst.min(rep.worst_slack);
        states += rep.states_checked;
    }
    Ok(SuiteReport {
        suite: Suite::RangeBound,
        description: "sampled range <= sqrt(2d) guessed range + 1e-6 (20 instances, 200 policies)"
            .into(),
        statistic: "worst slack".into(),
        value: worst,
        tolerance: 0.0,
        instances: states,
        passed: worst >= 0.0,
        elapsed_ms: None,
    })
}

fn concentrability_suite(seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut found = 0;
    let mut i = 0u64;
    while found < 10 {
        let (mdp, _) = random_instance(seed ^ (0xC0C0 << 8) ^ i, 2, 4, 4, 3)?;
        i += 1;
        if mdp.deterministic_policy_count().is_none_or(|c| c > 4096) {
            continue;
        }
        let behavior = random_policies(&mdp, 1, i)[0].clone();
        let dp = concentrability(&mdp, &behavior).stage("concentrability")?;
        let brute = concentrability_brute_force(&mdp, &behavior).stage("concentrability")?;
        let diff = if dp.c_conc == brute.c_conc {
            0.0
        } else {
            (dp.c_conc - brute.c_conc).abs()
        };
        worst = worst.max(diff);
        found += 1;
    }
    Ok(residual_report(
        Suite::Concentrability,
        "reachability DP versus enumeration of deterministic policies (10 instances, <= 4096 policies)",
        worst,
        1e-10,
        found,
    ))
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    Ok(match suite {
        Suite::LsqDecomposition => slack_report(
            suite,
            "least-squares error decomposition, 100 random draws",
            check_lsq_decomposition(seed),
        ),
        Suite::EllipticalPotential => slack_report(
            suite,
            "elliptical potential bound, 100 random streams",
            check_elliptical_potential(seed),
        ),
        Suite::ProjectionBound => slack_report(
            suite,
            "projection bound, 100 random draws",
            check_projection_bound(seed),
        ),
        Suite::PerfDiff => perf_diff_suite(seed)?,
        Suite::Occupancy => occupancy_suite(seed)?,
        Suite::Anchor => anchor_suite(seed)?,
        Suite::SkipRealizability => skip_suite(seed)?,
        Suite::RangeBound => range_suite(seed)?,
        Suite::Concentrability => concentrability_suite(seed)?,
    })
}

/// Runs `suites` in order; `timed` adds elapsed milliseconds to each entry.
pub fn verify(suites: &[Suite], seed: u64, timed: bool) -> Result<VerifyReport> {
    let mut reports = Vec::with_capacity(suites.len());
    for &s in suites {
        let start = Instant::now();
        let mut rep = run_suite(s, seed)?;
        if timed {
            rep.elapsed_ms = Some(start.elapsed().as_millis() as u64);
        }
        reports.push(rep);
    }
    let all_passed = reports.iter().all(|r| r.passed);
    Ok(VerifyReport {
        seed,
        suites: reports,
        all_passed,
    })
}
