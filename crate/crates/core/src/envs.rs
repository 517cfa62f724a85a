//! Feature maps, exact linear MDP generation and per-policy parameter fitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, min_norm_lstsq, norm, stack_rows, to_dvec};
use crate::mdp::{
    deterministic_policies, evaluate_policy, random_simplex, Policy, RewardKind, StagedMdp,
};

/// Feature norms may exceed `l1_bound` by at most this much.
pub const NORM_TOL: f64 = 1e-12;

/// Deterministic enumeration is used while the policy count stays at or below this.
pub const ENUMERATION_LIMIT: u128 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub d: usize,
    /// `phi[k][s][a]` is a `d`-vector.
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    pub l1_bound: f64,
    /// Set by the generator: transitions and rewards are linear in `phi`.
    #[serde(default)]
    pub exact_linear: bool,
}

impl FeatureMap {
    pub fn new(d: usize, phi: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let l1_bound = phi
            .iter()
            .flatten()
            .flatten()
            .map(|v| norm(v))
            .fold(0.0, f64::max);
        let fm = Self {
            d,
            phi,
            l1_bound,
            exact_linear: false,
        };
        fm.check_shape()?;
        Ok(fm)
    }

    pub fn get(&self, stage: usize, state: usize, action: usize) -> &[f64] {
        &self.phi[stage][state][action]
    }

    fn check_shape(&self) -> Result<()> {
        for (k, stage) in self.phi.iter().enumerate() {
            for (s, actions) in stage.iter().enumerate() {
                for (a, v) in actions.iter().enumerate() {
                    if v.len() != self.d {
                        return Err(Error::Structure(format!(
                            "feature ({k},{s},{a}) has dimension {} not {}",
                            v.len(),
                            self.d
                        )));
                    }
                    if norm(v) > self.l1_bound + NORM_TOL {
                        return Err(Error::Structure(format!(
                            "feature ({k},{s},{a}) exceeds norm bound {}",
                            self.l1_bound
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn check_against(&self, mdp: &StagedMdp) -> Result<()> {
        if self.phi.len() != mdp.horizon + 1 {
            return Err(Error::Structure(
                "feature map stage count differs from mdp".into(),
            ));
        }
        for (k, stage) in self.phi.iter().enumerate() {
            if stage.len() != mdp.stage_sizes[k] {
                return Err(Error::Structure(format!(
                    "feature map stage {k} has wrong size"
                )));
            }
            if stage.iter().any(|a| a.len() != mdp.num_actions) {
                return Err(Error::Structure(format!(
                    "feature map stage {k} has wrong action count"
                )));
            }
        }
        self.check_shape()
    }
}

/// Per-stage parameters `theta[k]` fitted to a policy's action values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<Vec<f64>>,
    pub l2_bound: f64,
    /// Sup-norm fit error over all stages.
    pub residual: f64,
    pub stage_residuals: Vec<f64>,
    /// Some stage feature matrix had rank below `d`.
    pub rank_deficient: bool,
}

/// `[1, width, ..., width, 1]` with `horizon + 1` entries.
pub fn uniform_stage_sizes(horizon: usize, width: usize) -> Vec<usize> {
    let mut sizes = vec![width; horizon + 1];
    sizes[0] = 1;
    sizes[horizon] = 1;
    sizes
}

const MAX_GENERATION_ROUNDS: usize = 100;

/// Random exact linear MDP: `P(s'|s,a) = <phi(s,a), mu(s')>`, `r(s,a) = <phi(s,a), theta_r>`.
///
/// Features live on the probability simplex, so mixtures of the `d` prototype
/// next-state distributions are distributions and rewards with
/// `theta_r in [0,1]^d` stay in `[0,1]`.
pub fn gen_linear_mdp(
    d: usize,
    stage_sizes: &[usize],
    num_actions: usize,
    reward_kind: RewardKind,
    seed: u64,
) -> Result<(StagedMdp, FeatureMap)> {
    if d == 0 {
        return Err(Error::Domain("feature dimension must be at least 1".into()));
    }
    if stage_sizes.len() < 2 || stage_sizes.contains(&0) || num_actions == 0 {
        return Err(Error::Domain(
            "stage sizes and action count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violated = String::new();
    for _ in 0..MAX_GENERATION_ROUNDS {
        match try_generate(d, stage_sizes, num_actions, reward_kind, &mut rng) {
            Ok(pair) => return Ok(pair),
            Err(e) => violated = e.to_string(),
        }
    }
    Err(Error::Generation {
        rounds: MAX_GENERATION_ROUNDS,
        violated,
    })
}

fn try_generate(
    d: usize,
    stage_sizes: &[usize],
    num_actions: usize,
    reward_kind: RewardKind,
    rng: &mut ChaCha8Rng,
) -> Result<(StagedMdp, FeatureMap)> {
    let horizon = stage_sizes.len() - 1;
    let mut sizes = stage_sizes.to_vec();
    sizes[0] = 1;
    sizes[horizon] = 1;
    let phi: Vec<Vec<Vec<Vec<f64>>>> = sizes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| (0..num_actions).map(|_| random_simplex(d, rng)).collect())
                .collect()
        })
        .collect();
    let mut transitions = Vec::with_capacity(horizon);
    let mut reward_means = Vec::with_capacity(horizon + 1);
    for k in 0..horizon {
        let prototypes: Vec<Vec<f64>> = (0..d).map(|_| random_simplex(sizes[k + 1], rng)).collect();
        let theta_r: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut stage_t = Vec::with_capacity(sizes[k]);
        let mut stage_r = Vec::with_capacity(sizes[k]);
        for s in 0..sizes[k] {
            let mut per_action = Vec::with_capacity(num_actions);
            let mut rewards = Vec::with_capacity(num_actions);
            for a in 0..num_actions {
                let f = &phi[k][s][a];
                let row: Vec<f64> = (0..sizes[k + 1])
                    .map(|sn| (0..d).map(|i| f[i] * prototypes[i][sn]).sum::<f64>())
                    .collect();
                per_action.push(row);
                rewards.push(dot(f, &theta_r).clamp(0.0, 1.0));
            }
            stage_t.push(per_action);
            stage_r.push(rewards);
        }
        transitions.push(stage_t);
        reward_means.push(stage_r);
    }
    reward_means.push(vec![vec![0.0; num_actions]]);
    let mdp = StagedMdp::new(sizes, num_actions, transitions, reward_means, reward_kind)?;
    let mut fm = FeatureMap::new(d, phi)?;
    fm.exact_linear = true;
    fm.check_against(&mdp)?;
    Ok((mdp, fm))
}

/// Least-squares fit of `q^pi` at every stage; the terminal parameter is forced to zero.
pub fn fit_psi(mdp: &StagedMdp, fm: &FeatureMap, policy: &Policy) -> Result<PolicyParams> {
    fm.check_against(mdp)?;
    let values = evaluate_policy(mdp, policy)?;
    fit_q_table(mdp, fm, &values.q)
}

/// Same fit for an arbitrary action-value table `q[k][s][a]`.
pub fn fit_q_table(mdp: &StagedMdp, fm: &FeatureMap, q: &[Vec<Vec<f64>>]) -> Result<PolicyParams> {
    let h = mdp.horizon;
    let mut theta = Vec::with_capacity(h + 1);
    let mut stage_residuals = Vec::with_capacity(h + 1);
    let mut rank_deficient = false;
    for k in 0..h {
        let rows: Vec<&[f64]> = fm.phi[k]
            .iter()
            .flat_map(|s| s.iter().map(|v| v.as_slice()))
            .collect();
        let targets: Vec<f64> = q[k].iter().flatten().copied().collect();
        let a = stack_rows(rows.iter().copied(), fm.d);
        let (x, rank) = min_norm_lstsq(&a, &to_dvec(&targets));
        if rank < fm.d {
            rank_deficient = true;
        }
        let x: Vec<f64> = x.iter().copied().collect();
        let residual = rows
            .iter()
            .zip(&targets)
            .map(|(r, t)| (t - dot(r, &x)).abs())
            .fold(0.0, f64::max);
        theta.push(x);
        stage_residuals.push(residual);
    }
    theta.push(vec![0.0; fm.d]);
    stage_residuals.push(q[h].iter().flatten().map(|x| x.abs()).fold(0.0, f64::max));
    let l2_bound = theta.iter().map(|t| norm(t)).fold(0.0, f64::max);
    let residual = stage_residuals.iter().cloned().fold(0.0, f64::max);
    Ok(PolicyParams {
        theta,
        l2_bound,
        residual,
        stage_residuals,
        rank_deficient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisspecEstimate {
    /// Largest sup-residual seen; a lower bound on the true misspecification.
    pub eta_hat: f64,
    pub policies_checked: usize,
    /// Every deterministic policy was checked.
    pub exhaustive: bool,
    /// The instance is an exact linear MDP, so the true value is zero.
    pub exact_linear: bool,
}

/// All deterministic policies when there are at most [`ENUMERATION_LIMIT`],
/// else `sample_size` random stochastic policies drawn in a fixed order.
pub fn policy_sample(mdp: &StagedMdp, sample_size: usize, seed: u64) -> (Vec<Policy>, bool) {
    match mdp.deterministic_policy_count() {
        Some(c) if c <= ENUMERATION_LIMIT => (deterministic_policies(mdp).collect(), true),
        _ => (random_policies(mdp, sample_size, seed), false),
    }
}

/// `count` random policies; a longer sample extends a shorter one with the same seed.
pub fn random_policies(mdp: &StagedMdp, count: usize, seed: u64) -> Vec<Policy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Policy::random(mdp, &mut rng)).collect()
}

pub fn estimate_misspecification(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    policy_sample_size: usize,
    seed: u64,
) -> Result<MisspecEstimate> {
    if policy_sample_size == 0 {
        return Err(Error::Domain(
            "policy sample size must be at least 1".into(),
        ));
    }
    let (policies, exhaustive) = policy_sample(mdp, policy_sample_size, seed);
    let eta_hat = max_residual(mdp, fm, &policies)?;
    Ok(MisspecEstimate {
        eta_hat,
        policies_checked: policies.len(),
        exhaustive,
        exact_linear: fm.exact_linear,
    })
}

/// Largest fit residual over the given policies.
pub fn max_residual(mdp: &StagedMdp, fm: &FeatureMap, policies: &[Policy]) -> Result<f64> {
    let residuals: Result<Vec<f64>> = policies
        .par_iter()
        .map(|p| fit_psi(mdp, fm, p).map(|r| r.residual))
        .collect();
    Ok(residuals?.into_iter().fold(0.0, f64::max))
}

/// `max_a <phi(s,a), theta> - min_a <phi(s,a), theta>`, i.e. the max over ordered action pairs.
pub fn action_spread(rows: &[Vec<f64>], theta: &[f64]) -> f64 {
    let (lo, hi) = rows
        .iter()
        .map(|r| dot(r, theta))
        .fold((f64::MAX, f64::MIN), |(lo, hi), x| (lo.min(x), hi.max(x)));
    (hi - lo).max(0.0)
}

fn check_range_domain(mdp: &StagedMdp, stage: usize, state: usize) -> Result<()> {
    if stage == 0 || stage >= mdp.horizon {
        return Err(Error::Domain(format!(
            "range is defined for stages 1..{} only, got {stage}",
            mdp.horizon
        )));
    }
    if state >= mdp.stage_sizes[stage] {
        return Err(Error::Domain(format!("state {state} not in stage {stage}")));
    }
    Ok(())
}

/// Sampled range of a state: a lower bound on the supremum over all policies.
pub fn true_range(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    policies: &[Policy],
    stage: usize,
    state: usize,
) -> Result<f64> {
    check_range_domain(mdp, stage, state)?;
    let params: Result<Vec<PolicyParams>> = policies.iter().map(|p| fit_psi(mdp, fm, p)).collect();
    true_range_from_params(mdp, fm, &params?, stage, state)
}

/// [`true_range`] with the per-policy fits precomputed.
pub fn true_range_from_params(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    params: &[PolicyParams],
    stage: usize,
    state: usize,
) -> Result<f64> {
    check_range_domain(mdp, stage, state)?;
    let rows = &fm.phi[stage][state];
    Ok(params
        .iter()
        .map(|p| action_spread(rows, &p.theta[stage]))
        .fold(0.0, f64::max))
}
