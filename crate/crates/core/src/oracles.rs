//! Brute-force and algebraic verifiers.
//!
//! Inequality checks report the worst slack (right side minus left side), so a
//! value near zero is visible before it turns into a violation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::Guess;
use crate::envs::{action_spread, fit_psi, FeatureMap, PolicyParams};
use crate::error::{Error, Result};
use crate::linalg::{min_norm_lstsq, quad_form, stack_rows, to_dvec};
use crate::mdp::{
    deterministic_policies, evaluate_policy, occupancy, optimal_policy, OccupancyMeasure, Policy,
    StagedMdp,
};
use crate::skipping::{check_value_function, expected_skip_return, omega, range_g, SkipParams};

/// Draws per randomized lemma check.
pub const LEMMA_DRAWS: usize = 100;
/// Most deterministic policies the brute-force concentrability oracle will enumerate.
pub const CONC_ENUMERATION_LIMIT: u128 = 1 << 16;
/// Most paths the skip-realizability oracle will enumerate from one state-action pair.
pub const PATH_LIMIT: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcReport {
    /// `max_{k,s,a} max_pi nu_k(s,a) / mu_k(s,a)`; infinite if a reachable pair has zero behavior mass.
    pub c_conc: f64,
    /// `(stage, state, action)` attaining the coefficient.
    pub witness: (usize, usize, usize),
    /// Largest ratio per stage `0..H`.
    pub stage_max: Vec<f64>,
}

impl ConcReport {
    pub fn is_infinite(&self) -> bool {
        self.c_conc.is_infinite()
    }
}

fn ratio(reach: f64, mu: f64) -> f64 {
    if reach == 0.0 {
        0.0
    } else if mu == 0.0 {
        f64::INFINITY
    } else {
        reach / mu
    }
}

fn report_from(
    mdp: &StagedMdp,
    mu: &OccupancyMeasure,
    best: impl Fn(usize, usize, usize) -> f64,
) -> ConcReport {
    let mut stage_max = vec![0.0; mdp.horizon];
    let mut c_conc = f64::NEG_INFINITY;
    let mut witness = (0, 0, 0);
    for k in 0..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            for a in 0..mdp.num_actions {
                let r = ratio(best(k, s, a), mu.nu[k][s][a]);
                stage_max[k] = f64::max(stage_max[k], r);
                if r > c_conc {
                    c_conc = r;
                    witness = (k, s, a);
                }
            }
        }
    }
    ConcReport {
        c_conc,
        witness,
        stage_max,
    }
}

/// `max_pi P_pi(S_k = s)` for every `(k, s)`, by a backward max-DP per target.
pub fn max_reachability(mdp: &StagedMdp) -> Vec<Vec<f64>> {
    (0..=mdp.horizon)
        .map(|k| {
            (0..mdp.stage_sizes[k])
                .map(|target| {
                    let mut w: Vec<f64> = (0..mdp.stage_sizes[k])
                        .map(|s| if s == target { 1.0 } else { 0.0 })
                        .collect();
                    for t in (0..k).rev() {
                        w = (0..mdp.stage_sizes[t])
                            .map(|s| {
                                (0..mdp.num_actions)
                                    .map(|a| {
                                        mdp.transitions[t][s][a]
                                            .iter()
                                            .zip(&w)
                                            .map(|(p, x)| p * x)
                                            .sum::<f64>()
                                    })
                                    .fold(0.0, f64::max)
                            })
                            .collect();
                    }
                    w[0]
                })
                .collect()
        })
        .collect()
}

/// Exact concentrability of `behavior`: the largest occupancy any policy can put on a
/// stage-state-action triple, relative to the behavior's occupancy of it.
pub fn concentrability(mdp: &StagedMdp, behavior: &Policy) -> Result<ConcReport> {
    let mu = occupancy(mdp, behavior)?;
    let reach = max_reachability(mdp);
    Ok(report_from(mdp, &mu, |k, s, _| reach[k][s]))
}

/// Same coefficient by enumerating every deterministic policy's occupancy.
pub fn concentrability_brute_force(mdp: &StagedMdp, behavior: &Policy) -> Result<ConcReport> {
    let count = mdp
        .deterministic_policy_count()
        .filter(|&c| c <= CONC_ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::TooLarge(format!(
                "more than {CONC_ENUMERATION_LIMIT} deterministic policies"
            ))
        })?;
    let mu = occupancy(mdp, behavior)?;
    let mut best: Vec<Vec<Vec<f64>>> = (0..mdp.horizon)
        .map(|k| vec![vec![0.0; mdp.num_actions]; mdp.stage_sizes[k]])
        .collect();
    let mut seen = 0u128;
    for pi in deterministic_policies(mdp) {
        let nu = occupancy(mdp, &pi)?;
        for (bk, nk) in best.iter_mut().zip(&nu.nu) {
            for (bs, ns) in bk.iter_mut().zip(nk) {
                for (b, n) in bs.iter_mut().zip(ns) {
                    *b = f64::max(*b, *n);
                }
            }
        }
        seen += 1;
    }
    debug_assert_eq!(seen, count);
    Ok(report_from(mdp, &mu, |k, s, a| best[k][s][a]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub draws: usize,
    /// Smallest `rhs - lhs` seen.
    pub worst_slack: f64,
    pub violations: usize,
}

impl LemmaReport {
    fn from_slacks(slacks: impl IntoIterator<Item = f64>, tol: f64) -> Self {
        let mut draws = 0;
        let mut worst = f64::INFINITY;
        let mut violations = 0;
        for s in slacks {
            draws += 1;
            worst = worst.min(s);
            if s < -tol {
                violations += 1;
            }
        }
        Self {
            draws,
            worst_slack: worst,
            violations,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Slack tolerance of the randomized lemma checks.
pub const SLACK_TOL: f64 = 1e-9;

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// One draw of the least-squares error decomposition, returning its slack.
pub fn lsq_decomposition_slack(
    features: &[DVector<f64>],
    theta_star: &DVector<f64>,
    noise: &[f64],
    bias: &[f64],
    lambda: f64,
) -> f64 {
    let d = theta_star.len();
    let n = features.len();
    let mut v = DMatrix::identity(d, d) * lambda;
    let mut rhs = DVector::zeros(d);
    let mut iota = DVector::zeros(d);
    for k in 0..n {
        let a = &features[k];
        v += a * a.transpose();
        rhs += a * (a.dot(theta_star) + noise[k] + bias[k]);
        iota += a * noise[k];
    }
    let chol = v
        .clone()
        .cholesky()
        .expect("ridge matrix is positive definite");
    let theta_hat = chol.solve(&rhs);
    let lhs = quad_form(&v, &(&theta_hat - theta_star)).max(0.0).sqrt();
    let bias_inf = bias.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let iota_norm = quad_form(&chol.inverse(), &iota).max(0.0).sqrt();
    lambda.sqrt() * theta_star.norm() + bias_inf * (n as f64).sqrt() + iota_norm - lhs
}

/// `||theta_hat - theta*||_V <= sqrt(lambda) ||theta*|| + ||Delta||_inf sqrt(n) + ||iota||_{V^-1}`
/// over random draws with `d <= 5`, `n <= 50`.
pub fn check_lsq_decomposition(seed: u64) -> LemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slacks: Vec<f64> = (0..LEMMA_DRAWS)
        .map(|_| {
            let d = rng.random_range(1..=5);
            let n = rng.random_range(1..=50);
            let scale = log_uniform(&mut rng, 0.1, 10.0);
            let features: Vec<DVector<f64>> =
                (0..n).map(|_| gaussian_vec(&mut rng, d, scale)).collect();
            let theta = gaussian_vec(&mut rng, d, 1.0);
            let noise_scale = log_uniform(&mut rng, 1e-3, 2.0);
            let noise: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-noise_scale..=noise_scale))
                .collect();
            let bias_scale = if rng.random_bool(0.2) {
                0.0
            } else {
                log_uniform(&mut rng, 1e-3, 1.0)
            };
            let bias: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-1.0..=1.0) * bias_scale)
                .collect();
            let lambda = log_uniform(&mut rng, 1e-4, 10.0);
            lsq_decomposition_slack(&features, &theta, &noise, &bias, lambda)
        })
        .collect();
    LemmaReport::from_slacks(slacks, SLACK_TOL)
}

/// Slack of `sum_t min(1, ||a_t||^2_{V_{t-1}^{-1}}) <= 2d log((d lambda + n L^2) / (d lambda))`
/// with `V_0 = lambda I` and `L` the largest norm in the stream.
pub fn elliptical_potential_slack(stream: &[DVector<f64>], lambda: f64) -> f64 {
    let d = stream.first().map(|a| a.len()).unwrap_or(1);
    let n = stream.len() as f64;
    let l = stream.iter().map(|a| a.norm()).fold(0.0, f64::max);
    let mut v = DMatrix::identity(d, d) * lambda;
    let mut lhs = 0.0;
    for a in stream {
        let inv = v.clone().cholesky().expect("positive definite").inverse();
        lhs += quad_form(&inv, a).min(1.0);
        v += a * a.transpose();
    }
    let df = d as f64;
    2.0 * df * ((df * lambda + n * l * l) / (df * lambda)).ln() - lhs
}

pub fn check_elliptical_potential(seed: u64) -> LemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slacks: Vec<f64> = (0..LEMMA_DRAWS)
        .map(|_| {
            let d = rng.random_range(1..=6);
            let n = rng.random_range(1..=80);
            let scale = log_uniform(&mut rng, 0.05, 5.0);
            let stream: Vec<DVector<f64>> =
                (0..n).map(|_| gaussian_vec(&mut rng, d, scale)).collect();
            let lambda = log_uniform(&mut rng, 1e-2, 10.0);
            elliptical_potential_slack(&stream, lambda)
        })
        .collect();
    LemmaReport::from_slacks(slacks, SLACK_TOL)
}

/// Slack of `||sum a_i b_i||^2_{(sum a_i a_i^T + lambda I)^{-1}} <= n c^2`, `|b_i| <= c`.
pub fn projection_bound_slack(
    vectors: &[DVector<f64>],
    scalars: &[f64],
    c: f64,
    lambda: f64,
) -> f64 {
    let d = vectors.first().map(|a| a.len()).unwrap_or(1);
    let mut m = DMatrix::identity(d, d) * lambda;
    let mut s = DVector::zeros(d);
    for (a, b) in vectors.iter().zip(scalars) {
        m += a * a.transpose();
        s += a * *b;
    }
    let inv = m.cholesky().expect("positive definite").inverse();
    vectors.len() as f64 * c * c - quad_form(&inv, &s)
}

pub fn check_projection_bound(seed: u64) -> LemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slacks: Vec<f64> = (0..LEMMA_DRAWS)
        .map(|_| {
            let d = rng.random_range(1..=6);
            let n = rng.random_range(1..=60);
            let scale = log_uniform(&mut rng, 0.05, 5.0);
            let vectors: Vec<DVector<f64>> =
                (0..n).map(|_| gaussian_vec(&mut rng, d, scale)).collect();
            let c = log_uniform(&mut rng, 0.1, 3.0);
            // extreme signs push the left side toward the bound
            let scalars: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        c * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        rng.random_range(-c..=c)
                    }
                })
                .collect();
            let lambda = log_uniform(&mut rng, 1e-6, 10.0);
            projection_bound_slack(&vectors, &scalars, c, lambda)
        })
        .collect();
    LemmaReport::from_slacks(slacks, SLACK_TOL)
}

/// `|v^a(s_1) - v^b(s_1) - sum_k E_{nu^a_k}[q^b - v^b]|` from exact evaluation and occupancy.
pub fn check_perf_diff(mdp: &StagedMdp, policy_a: &Policy, policy_b: &Policy) -> Result<f64> {
    let va = evaluate_policy(mdp, policy_a)?;
    let vb = evaluate_policy(mdp, policy_b)?;
    let nu = occupancy(mdp, policy_a)?;
    let mut rhs = 0.0;
    for k in 0..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            for a in 0..mdp.num_actions {
                rhs += nu.nu[k][s][a] * (vb.q[k][s][a] - vb.v[k][s]);
            }
        }
    }
    Ok((va.start_value() - vb.start_value() - rhs).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBoundReport {
    /// Smallest `sqrt(2d) range_G(s) + 1e-6 - range(s)` over interior states.
    pub worst_slack: f64,
    pub witness: (usize, usize),
    pub states_checked: usize,
}

impl RangeBoundReport {
    pub fn passed(&self) -> bool {
        self.worst_slack >= 0.0
    }
}

/// Additive tolerance of the range bound.
pub const RANGE_TOL: f64 = 1e-6;

/// Checks that the guessed range, scaled by `sqrt(2d)`, dominates the range
/// sampled over `policies` at every interior state.
pub fn check_range_bound(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    guess: &Guess,
    policies: &[Policy],
) -> Result<RangeBoundReport> {
    let params: Result<Vec<PolicyParams>> = policies.iter().map(|p| fit_psi(mdp, fm, p)).collect();
    check_range_bound_from_params(mdp, fm, guess, &params?)
}

pub fn check_range_bound_from_params(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    guess: &Guess,
    params: &[PolicyParams],
) -> Result<RangeBoundReport> {
    let scale = (2.0 * fm.d as f64).sqrt();
    let mut worst = f64::INFINITY;
    let mut witness = (0, 0);
    let mut count = 0;
    for k in 1..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            let rows = &fm.phi[k][s];
            let sampled = params
                .iter()
                .map(|p| action_spread(rows, &p.theta[k]))
                .fold(0.0, f64::max);
            let slack = scale * range_g(guess, fm, k, s)? + RANGE_TOL - sampled;
            if slack < worst {
                worst = slack;
                witness = (k, s);
            }
            count += 1;
        }
    }
    Ok(RangeBoundReport {
        worst_slack: worst,
        witness,
        states_checked: count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRealizabilityReport {
    pub sup_residual: f64,
    pub theta: Vec<f64>,
    /// Exact expected skip targets `targets[s][a]`.
    pub targets: Vec<Vec<f64>>,
    pub paths: u128,
}

fn path_bound(mdp: &StagedMdp, h: usize) -> u128 {
    (h + 1..=mdp.horizon).fold(1u128, |acc, t| {
        let branch = mdp.stage_sizes[t] as u128
            * if t < mdp.horizon {
                mdp.num_actions as u128
            } else {
                1
            };
        acc.saturating_mul(branch)
    })
}

/// Exact expected skip target from `(s, a)` at stage `h` when later actions follow
/// `behavior`, computed by enumerating every path, then the sup residual of the
/// best linear fit across stage `h`.
#[allow(clippy::too_many_arguments)]
pub fn check_skip_realizability(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    guess: &Guess,
    behavior: &Policy,
    f: &[Vec<f64>],
    h: usize,
    params: &SkipParams,
) -> Result<SkipRealizabilityReport> {
    if h >= mdp.horizon {
        return Err(Error::Domain(format!("stage {h} has no successor")));
    }
    check_value_function(f, mdp.horizon)?;
    behavior.validate_for(mdp)?;
    fm.check_against(mdp)?;
    let bound = path_bound(mdp, h);
    if bound > PATH_LIMIT {
        return Err(Error::TooLarge(format!(
            "enumeration from stage {h} needs up to {bound} paths per pair, limit {PATH_LIMIT}"
        )));
    }
    let omegas: Vec<Vec<f64>> = (0..=mdp.horizon)
        .map(|k| {
            (0..mdp.stage_sizes[k])
                .map(|s| omega(guess, fm, k, s, params))
                .collect()
        })
        .collect();

    struct Walk<'a> {
        mdp: &'a StagedMdp,
        behavior: &'a Policy,
        f: &'a [Vec<f64>],
        omegas: &'a [Vec<f64>],
        h: usize,
        rewards: Vec<f64>,
        path_omegas: Vec<f64>,
        values: Vec<f64>,
        total: f64,
        paths: u128,
    }
    impl Walk<'_> {
        // extend a path that has reached state `s` at stage `t` with probability `p`
        fn visit(&mut self, t: usize, s: usize, p: f64) {
            self.path_omegas[t] = self.omegas[t][s];
            self.values[t] = self.f[t][s];
            if t == self.mdp.horizon {
                self.rewards[t] = 0.0;
                self.total += p * expected_skip_return(
                    self.h,
                    &self.rewards,
                    &self.path_omegas,
                    &self.values,
                );
                self.paths += 1;
                return;
            }
            for a in 0..self.mdp.num_actions {
                let pa = self.behavior.action_probs[t][s][a];
                if pa == 0.0 {
                    continue;
                }
                self.rewards[t] = self.mdp.reward_means[t][s][a];
                self.step(t, s, a, p * pa);
            }
        }

        fn step(&mut self, t: usize, s: usize, a: usize, p: f64) {
            let row = &self.mdp.transitions[t][s][a];
            for (next, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    self.visit(t + 1, next, p * q);
                }
            }
        }
    }

    let hz = mdp.horizon;
    let mut targets = Vec::with_capacity(mdp.stage_sizes[h]);
    let mut paths = 0u128;
    for s in 0..mdp.stage_sizes[h] {
        let mut row = Vec::with_capacity(mdp.num_actions);
        for a in 0..mdp.num_actions {
            let mut walk = Walk {
                mdp,
                behavior,
                f,
                omegas: &omegas,
                h,
                rewards: vec![0.0; hz + 1],
                path_omegas: vec![0.0; hz + 1],
                values: vec![0.0; hz + 1],
                total: 0.0,
                paths: 0,
            };
            walk.rewards[h] = mdp.reward_means[h][s][a];
            walk.step(h, s, a, 1.0);
            paths += walk.paths;
            row.push(walk.total);
        }
        targets.push(row);
    }
    let rows: Vec<&[f64]> = fm.phi[h]
        .iter()
        .flat_map(|s| s.iter().map(|v| v.as_slice()))
        .collect();
    let y: Vec<f64> = targets.iter().flatten().copied().collect();
    let (theta, _) = min_norm_lstsq(&stack_rows(rows.iter().copied(), fm.d), &to_dvec(&y));
    let theta: Vec<f64> = theta.iter().copied().collect();
    let sup_residual = rows
        .iter()
        .zip(&y)
        .map(|(r, t)| (t - crate::linalg::dot(r, &theta)).abs())
        .fold(0.0, f64::max);
    Ok(SkipRealizabilityReport {
        sup_residual,
        theta,
        targets,
        paths,
    })
}

/// `v*(s_1) - v^pi(s_1)` by exact dynamic programming.
pub fn suboptimality(mdp: &StagedMdp, policy: &Policy) -> Result<f64> {
    let (_, opt) = optimal_policy(mdp)?;
    Ok(opt.start_value() - evaluate_policy(mdp, policy)?.start_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardKind;

    fn line(horizon: usize, num_actions: usize) -> StagedMdp {
        StagedMdp::new(
            vec![1; horizon + 1],
            num_actions,
            vec![vec![vec![vec![1.0]; num_actions]]; horizon],
            (0..=horizon)
                .map(|k| vec![vec![if k < horizon { 0.5 } else { 0.0 }; num_actions]])
                .collect(),
            RewardKind::DeterministicMean,
        )
        .unwrap()
    }

    /// start --a0--> state 0 (max reward 1), --a1--> state 1 (max reward 0.2)
    fn chain() -> StagedMdp {
        StagedMdp::new(
            vec![1, 2, 1],
            2,
            vec![
                vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
                vec![vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
            ],
            vec![
                vec![vec![0.1, 0.3]],
                vec![vec![1.0, 0.5], vec![0.2, 0.0]],
                vec![vec![0.0, 0.0]],
            ],
            RewardKind::DeterministicMean,
        )
        .unwrap()
    }

    #[test]
    fn uniform_two_action_line_has_coefficient_two() {
        let mdp = line(3, 2);
        let rep = concentrability(&mdp, &Policy::uniform(&mdp)).unwrap();
        assert!((rep.c_conc - 2.0).abs() < 1e-15);
        assert_eq!(rep.stage_max, vec![2.0; 3]);
    }

    #[test]
    fn deterministic_behavior_on_single_action_is_one() {
        let mdp = line(2, 1);
        let rep = concentrability(&mdp, &Policy::uniform(&mdp)).unwrap();
        assert_eq!(rep.c_conc, 1.0);
    }

    #[test]
    fn uncovered_reachable_pair_is_infinite() {
        let mdp = chain();
        let behavior = Policy::deterministic(&mdp, &[vec![0], vec![0, 0]]).unwrap();
        let rep = concentrability(&mdp, &behavior).unwrap();
        assert!(rep.is_infinite());
        let brute = concentrability_brute_force(&mdp, &behavior).unwrap();
        assert!(brute.is_infinite());
    }

    #[test]
    fn chain_dp_matches_enumeration() {
        let mdp = chain();
        let behavior = Policy::uniform(&mdp);
        let a = concentrability(&mdp, &behavior).unwrap();
        let b = concentrability_brute_force(&mdp, &behavior).unwrap();
        assert!((a.c_conc - b.c_conc).abs() < 1e-12);
        assert_eq!(a.witness, b.witness);
        // stage-1 states are reached w.p. 1/2 and each action is taken w.p. 1/2
        assert!((a.c_conc - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lsq_without_noise_or_bias_recovers_theta() {
        let features: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 2.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ];
        let theta = DVector::from_vec(vec![0.3, -0.7]);
        let slack = lsq_decomposition_slack(&features, &theta, &[0.0; 3], &[0.0; 3], 1e-12);
        assert!((-1e-12..1e-5).contains(&slack));
    }

    #[test]
    fn elliptical_zero_stream_has_zero_left_side() {
        let stream = vec![DVector::zeros(3); 5];
        // L = 0 makes the right side zero as well
        assert_eq!(elliptical_potential_slack(&stream, 1.0), 0.0);
    }

    #[test]
    fn projection_rank_one_closed_form() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let (b, c, lambda) = (0.8, 1.0, 0.5);
        let slack = projection_bound_slack(std::slice::from_ref(&a), &[b], c, lambda);
        let closed = b * b * a.norm_squared() / (a.norm_squared() + lambda);
        assert!((slack - (c * c - closed)).abs() < 1e-12);
        assert_eq!(projection_bound_slack(&[a], &[0.0], c, lambda), c * c);
    }

    #[test]
    fn randomized_lemmas_hold() {
        for seed in 0..3 {
            assert!(check_lsq_decomposition(seed).passed());
            assert!(check_elliptical_potential(seed).passed());
            assert!(check_projection_bound(seed).passed());
        }
    }

    #[test]
    fn perf_diff_on_chain() {
        let mdp = chain();
        let det = Policy::deterministic(&mdp, &[vec![0], vec![0, 0]]).unwrap();
        let uni = Policy::uniform(&mdp);
        assert!(check_perf_diff(&mdp, &det, &uni).unwrap() < 1e-14);
        assert_eq!(check_perf_diff(&mdp, &uni, &uni).unwrap(), 0.0);
        // v^det = 1.1, v^uni = 0.625
        let vu = evaluate_policy(&mdp, &uni).unwrap().start_value();
        assert!((vu - 0.625).abs() < 1e-15);
    }

    #[test]
    fn suboptimality_by_hand() {
        let mdp = chain();
        let worst = Policy::deterministic(&mdp, &[vec![1], vec![0, 1]]).unwrap();
        assert!((suboptimality(&mdp, &worst).unwrap() - 0.8).abs() < 1e-14);
        let (opt, _) = optimal_policy(&mdp).unwrap();
        assert_eq!(suboptimality(&mdp, &opt).unwrap(), 0.0);
    }

    #[test]
    fn skip_targets_vanish_without_reward_or_value() {
        let mdp = StagedMdp::new(
            vec![1, 2, 2, 1],
            2,
            vec![
                vec![vec![vec![0.5, 0.5]; 2]],
                vec![vec![vec![0.3, 0.7]; 2]; 2],
                vec![vec![vec![1.0]; 2]; 2],
            ],
            vec![
                vec![vec![0.0; 2]],
                vec![vec![0.0; 2]; 2],
                vec![vec![0.0; 2]; 2],
                vec![vec![0.0; 2]],
            ],
            RewardKind::DeterministicMean,
        )
        .unwrap();
        let phi = (0..4)
            .map(|k| vec![vec![vec![1.0]; 2]; mdp.stage_sizes[k]])
            .collect();
        let fm = FeatureMap::new(1, phi).unwrap();
        let guess = Guess::zeros(3, 1, 1.0);
        let f: Vec<Vec<f64>> = mdp.stage_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let params = SkipParams::new(0.5, 1).unwrap();
        let rep =
            check_skip_realizability(&mdp, &fm, &guess, &Policy::uniform(&mdp), &f, 0, &params)
                .unwrap();
        assert_eq!(rep.sup_residual, 0.0);
        // two start actions, each branching over 2 states x 2 actions x 2 states x 1
        assert_eq!(rep.paths, 2 * 2 * 2 * 2 * 2);
    }
}
