//! Finite-pool solver for the skip-aware optimistic offline learner.
//!
//! For every candidate guess the solver builds, backward over stages, the
//! least-squares anchors obtained from every combination of later-stage
//! parameters, keeps a finite pool of parameters inside the union of the
//! `X_h`-ellipsoids of radius `beta` around those anchors, rejects guesses
//! whose pools give loose q-estimates on the data, and finally picks the
//! feasible guess and start-stage parameter with the largest clipped value at
//! the start state. The output policy is greedy in the clipped q-estimates.
//!
//! The true parameter sets are infinite; membership checks are exact for the
//! tested points, while set-level max/min over a pool are lower bounds of the
//! true ones.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{d_zero, epsilon_net, Guess};
use crate::envs::{fit_psi, FeatureMap};
use crate::error::{Error, Result};
use crate::linalg::{dot, quad_form, to_dvec};
use crate::mdp::{argmax, collect_dataset, Dataset, Policy, StagedMdp, ValueTables};
use crate::skipping::{
    expected_skip_return, omega, omega_from_range, range_from_rows, stop_distribution_from_omegas,
    SkipParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Ridge parameter of the stage covariances.
    pub lambda: f64,
    /// Ellipsoid radius in the `X_h` norm.
    pub beta: f64,
    /// Tightness threshold.
    pub eps_bar: f64,
    /// Euclidean radius every retained parameter must respect.
    pub theta_radius: f64,
    /// Skip threshold.
    pub alpha: f64,
    /// Local candidates kept per stage in addition to anchors and diagnostics.
    pub grid_per_stage: usize,
    /// Most tail combinations turned into anchors per stage.
    pub combo_cap: usize,
    /// Covering radius of the unit-ball net that shapes the local candidates.
    pub net_xi: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            eps_bar: 1.0,
            theta_radius: 1e6,
            alpha: 0.05,
            grid_per_stage: 8,
            combo_cap: 256,
            net_xi: 0.75,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("eps_bar", self.eps_bar),
            ("theta_radius", self.theta_radius),
            ("alpha", self.alpha),
            ("net_xi", self.net_xi),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config("alpha must not exceed 1".into()));
        }
        if self.grid_per_stage == 0 || self.combo_cap == 0 {
            return Err(Error::Config(
                "grid_per_stage and combo_cap must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn skip_params(&self, d: usize) -> Result<SkipParams> {
        SkipParams::new(self.alpha, d)
    }
}

/// `clip(<phi(s,a), theta>)` into `[0, H]`.
pub fn clipped_q(theta: &[f64], fm: &FeatureMap, stage: usize, state: usize, action: usize) -> f64 {
    let horizon = (fm.phi.len() - 1) as f64;
    dot(&fm.phi[stage][state][action], theta).clamp(0.0, horizon)
}

/// `clip(max_a <phi(s,a), theta>)` into `[0, H]`; the clip is applied after the max.
pub fn clipped_v(theta: &[f64], fm: &FeatureMap, stage: usize, state: usize) -> f64 {
    let horizon = (fm.phi.len() - 1) as f64;
    clipped_v_rows(theta, &fm.phi[stage][state], horizon)
}

fn clipped_v_rows(theta: &[f64], rows: &[Vec<f64>], horizon: f64) -> f64 {
    rows.iter()
        .map(|r| dot(r, theta))
        .fold(f64::MIN, f64::max)
        .clamp(0.0, horizon)
}

#[derive(Clone, Debug)]
pub struct StageCovariance {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    /// Lower Cholesky factor `L` with `X = L L^T`.
    pub factor: DMatrix<f64>,
}

impl StageCovariance {
    fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
        Ok(Self {
            inverse: chol.inverse(),
            factor: chol.l(),
            matrix,
        })
    }

    /// `||x||_X`.
    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.matrix, x).max(0.0).sqrt()
    }

    /// `||x||_{X^{-1}}`.
    pub fn inverse_norm(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.inverse, x).max(0.0).sqrt()
    }

    /// `L^{-T} u`, which has `X`-norm `||u||`.
    pub fn unwhiten(&self, u: &DVector<f64>) -> DVector<f64> {
        self.factor
            .transpose()
            .solve_upper_triangular(u)
            .expect("cholesky factor is nonsingular")
    }
}

fn check_dataset(dataset: &Dataset) -> Result<(usize, usize, usize)> {
    let first = dataset
        .trajectories
        .first()
        .ok_or_else(|| Error::Domain("dataset is empty".into()))?;
    let horizon = first.horizon();
    if first.features.len() != horizon + 1 {
        return Err(Error::Structure(
            "trajectories must carry recorded features".into(),
        ));
    }
    let num_actions = first.features[0].len();
    let d = first.features[0].first().map(|v| v.len()).unwrap_or(0);
    for (j, t) in dataset.trajectories.iter().enumerate() {
        if t.steps.len() != horizon + 1 || t.features.len() != horizon + 1 {
            return Err(Error::Structure(format!(
                "trajectory {j} has the wrong length"
            )));
        }
        if t.features
            .iter()
            .any(|f| f.len() != num_actions || f.iter().any(|v| v.len() != d))
        {
            return Err(Error::Structure(format!(
                "trajectory {j} has malformed features"
            )));
        }
    }
    Ok((horizon, num_actions, d))
}

/// `X_h = lambda I + sum_j phi_h^j (phi_h^j)^T`.
pub fn stage_covariance(dataset: &Dataset, h: usize, lambda: f64) -> Result<StageCovariance> {
    let (horizon, _, d) = check_dataset(dataset)?;
    if h >= horizon {
        return Err(Error::Domain(format!(
            "stage {h} is not below the horizon {horizon}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain("lambda must be positive".into()));
    }
    let mut m = DMatrix::identity(d, d) * lambda;
    for t in &dataset.trajectories {
        let v = to_dvec(t.taken_feature(h));
        m += &v * v.transpose();
    }
    StageCovariance::from_matrix(m)
}

/// `theta_hat = X_h^{-1} sum_j phi_h^j y_j` where `y_j` is the skip-aware
/// target of trajectory `j` under `guess`, bootstrapped with the clipped values
/// of `theta_tail` (parameters of stages `h+1..=H`).
pub fn lstsq_anchor(
    dataset: &Dataset,
    h: usize,
    guess: &Guess,
    theta_tail: &[Vec<f64>],
    config: &LearnerConfig,
) -> Result<Vec<f64>> {
    let (horizon, _, d) = check_dataset(dataset)?;
    if theta_tail.len() != horizon - h {
        return Err(Error::Structure(format!(
            "tail must hold {} parameters, got {}",
            horizon - h,
            theta_tail.len()
        )));
    }
    let params = config.skip_params(d)?;
    let cov = stage_covariance(dataset, h, config.lambda)?;
    let targets = anchor_targets(dataset, h, guess, theta_tail, &params);
    let mut rhs = DVector::zeros(d);
    for (t, y) in dataset.trajectories.iter().zip(&targets) {
        rhs += to_dvec(t.taken_feature(h)) * *y;
    }
    Ok((&cov.inverse * rhs).iter().copied().collect())
}

/// Per-trajectory skip-aware targets used by [`lstsq_anchor`].
pub fn anchor_targets(
    dataset: &Dataset,
    h: usize,
    guess: &Guess,
    theta_tail: &[Vec<f64>],
    params: &SkipParams,
) -> Vec<f64> {
    let hf = dataset.trajectories[0].horizon();
    dataset
        .trajectories
        .iter()
        .map(|t| {
            let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
            let omegas: Vec<f64> = (0..=hf)
                .map(|k| {
                    if k == 0 || k >= hf {
                        0.0
                    } else {
                        omega_from_range(range_from_rows(guess.panel(k), &t.features[k]), params)
                    }
                })
                .collect();
            let values: Vec<f64> = (0..=hf)
                .map(|k| {
                    if k <= h {
                        0.0
                    } else {
                        clipped_v_rows(&theta_tail[k - h - 1], &t.features[k], hf as f64)
                    }
                })
                .collect();
            expected_skip_return(h, &rewards, &omegas, &values)
        })
        .collect()
}

/// Data laid out per stage for repeated anchor and tightness evaluations.
pub struct PreparedData {
    pub n: usize,
    pub horizon: usize,
    pub d: usize,
    pub num_actions: usize,
    /// `taken[k]`: `n x d` features of the taken actions.
    taken: Vec<DMatrix<f64>>,
    /// `all_actions[k]`: `(n * A) x d`, trajectory-major.
    all_actions: Vec<DMatrix<f64>>,
    rewards: Vec<Vec<f64>>,
    pub covariances: Vec<StageCovariance>,
    /// `X_k^{-1} Phi_k^T`, `d x n`.
    solve_maps: Vec<DMatrix<f64>>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, lambda: f64) -> Result<Self> {
        let (horizon, num_actions, d) = check_dataset(dataset)?;
        let n = dataset.len();
        let mut taken = Vec::with_capacity(horizon + 1);
        let mut all_actions = Vec::with_capacity(horizon + 1);
        let mut rewards = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            taken.push(DMatrix::from_fn(n, d, |j, i| {
                dataset.trajectories[j].taken_feature(k)[i]
            }));
            all_actions.push(DMatrix::from_fn(n * num_actions, d, |row, i| {
                dataset.trajectories[row / num_actions].features[k][row % num_actions][i]
            }));
            rewards.push(
                dataset
                    .trajectories
                    .iter()
                    .map(|t| t.steps[k].reward)
                    .collect(),
            );
        }
        let mut covariances = Vec::with_capacity(horizon);
        let mut solve_maps = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let phi = &taken[k];
            let cov = StageCovariance::from_matrix(
                DMatrix::identity(d, d) * lambda + phi.transpose() * phi,
            )?;
            solve_maps.push(&cov.inverse * phi.transpose());
            covariances.push(cov);
        }
        Ok(Self {
            n,
            horizon,
            d,
            num_actions,
            taken,
            all_actions,
            rewards,
            covariances,
            solve_maps,
        })
    }

    /// Clipped state values `clip(max_a <phi(s_k^j, a), theta>)` for every trajectory.
    fn clipped_values(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        let scores = &self.all_actions[k] * to_dvec(theta);
        let hf = self.horizon as f64;
        scores
            .as_slice()
            .chunks(self.num_actions)
            .map(|c| c.iter().cloned().fold(f64::MIN, f64::max).clamp(0.0, hf))
            .collect()
    }

    /// Skip probabilities `omegas[k][j]` of the visited states under `guess`.
    fn omegas(&self, guess: &Guess, params: &SkipParams) -> Vec<Vec<f64>> {
        (0..=self.horizon)
            .map(|k| {
                if k == 0 || k >= self.horizon {
                    return vec![0.0; self.n];
                }
                let panel = guess.panel(k);
                let mut ranges = vec![0.0f64; self.n];
                for v in panel {
                    let scores = &self.all_actions[k] * to_dvec(v);
                    for (j, c) in scores.as_slice().chunks(self.num_actions).enumerate() {
                        let (lo, hi) = c
                            .iter()
                            .fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
                        ranges[j] = ranges[j].max(hi - lo);
                    }
                }
                ranges
                    .iter()
                    .map(|&r| omega_from_range(r, params))
                    .collect()
            })
            .collect()
    }

    /// Mean over trajectories of `max - min` clipped q-estimates at stage `h` across `thetas`.
    pub fn tightness(&self, h: usize, thetas: &[Vec<f64>]) -> f64 {
        if thetas.is_empty() || self.n == 0 {
            return 0.0;
        }
        let hf = self.horizon as f64;
        let mut lo = vec![f64::MAX; self.n];
        let mut hi = vec![f64::MIN; self.n];
        for theta in thetas {
            let q = &self.taken[h] * to_dvec(theta);
            for (j, &x) in q.iter().enumerate() {
                let c = x.clamp(0.0, hf);
                lo[j] = lo[j].min(c);
                hi[j] = hi[j].max(c);
            }
        }
        lo.iter().zip(&hi).map(|(l, u)| u - l).sum::<f64>() / self.n as f64
    }
}

/// `(1/n) sum_j (max_theta qbar - min_theta qbar)` at stage `h`.
pub fn tightness(dataset: &Dataset, h: usize, thetas: &[Vec<f64>]) -> Result<f64> {
    let (horizon, _, _) = check_dataset(dataset)?;
    if thetas.is_empty() {
        return Err(Error::Domain(
            "tightness needs a nonempty parameter set".into(),
        ));
    }
    if h >= horizon {
        return Err(Error::Domain(format!("stage {h} is not below the horizon")));
    }
    let hf = horizon as f64;
    let total: f64 = dataset
        .trajectories
        .iter()
        .map(|t| {
            let f = t.taken_feature(h);
            let qs = thetas.iter().map(|th| dot(f, th).clamp(0.0, hf));
            let (lo, hi) = qs.fold((f64::MAX, f64::MIN), |(lo, hi), x| (lo.min(x), hi.max(x)));
            hi - lo
        })
        .sum();
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberKind {
    Anchor,
    /// Externally supplied parameter under test.
    Diagnostic,
    /// Local candidate inside an anchor's ellipsoid.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSet {
    pub anchors: Vec<Vec<f64>>,
    /// Retained parameters: anchors first, then diagnostics, then local candidates.
    pub members: Vec<Vec<f64>>,
    pub kinds: Vec<MemberKind>,
    /// Number of tail combinations in the full Cartesian product (saturating).
    pub combos_total: u128,
    pub combos_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSetApprox {
    /// One set per stage `0..=H`; the terminal set is `{0}`.
    pub stages: Vec<StageSet>,
    /// First stage whose retained set came out empty, if any.
    pub empty_stage: Option<usize>,
}

impl ConfidenceSetApprox {
    pub fn members(&self, stage: usize) -> &[Vec<f64>] {
        &self.stages[stage].members
    }
}

/// Minimum `X`-distance from `theta` to the anchors.
pub fn ellipsoid_distance(theta: &[f64], anchors: &[Vec<f64>], cov: &StageCovariance) -> f64 {
    let x = to_dvec(theta);
    anchors
        .iter()
        .map(|a| cov.norm(&(&x - to_dvec(a))))
        .fold(f64::INFINITY, f64::min)
}

/// Ball constraint plus ellipsoid test against the anchors of one stage.
pub fn passes_ellipsoid(
    theta: &[f64],
    anchors: &[Vec<f64>],
    cov: &StageCovariance,
    config: &LearnerConfig,
) -> bool {
    crate::linalg::norm(theta) <= config.theta_radius
        && ellipsoid_distance(theta, anchors, cov) <= config.beta
}

fn tail_combos(radices: &[usize], cap: usize, seed: u64) -> (u128, Vec<Vec<usize>>) {
    let total = radices
        .iter()
        .fold(1u128, |acc, &r| acc.saturating_mul(r as u128));
    let decode = |mut idx: u128| -> Vec<usize> {
        radices
            .iter()
            .map(|&r| {
                let digit = (idx % r as u128) as usize;
                idx /= r as u128;
                digit
            })
            .collect()
    };
    if total <= cap as u128 {
        return (total, (0..total).map(decode).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if total <= usize::MAX as u128 {
        let mut picked: Vec<usize> = sample(&mut rng, total as usize, cap).into_vec();
        picked.sort_unstable();
        return (
            total,
            picked.into_iter().map(|i| decode(i as u128)).collect(),
        );
    }
    use rand::Rng;
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < cap {
        let combo: Vec<usize> = radices.iter().map(|&r| rng.random_range(0..r)).collect();
        seen.insert(combo);
    }
    (total, seen.into_iter().collect())
}

/// Backward construction of the finite confidence-set approximations for one guess.
///
/// `diagnostics`, when given, holds one parameter per stage `0..=H` that is
/// inserted into the pool (if it passes the ellipsoid test) so that later
/// stages build anchors from it.
pub fn build_confidence_sets_prepared(
    data: &PreparedData,
    guess: &Guess,
    config: &LearnerConfig,
    diagnostics: Option<&[Vec<f64>]>,
) -> Result<ConfidenceSetApprox> {
    config.validate()?;
    let horizon = data.horizon;
    let d = data.d;
    let params = config.skip_params(d)?;
    let omegas = data.omegas(guess, &params);
    let unit_net: Vec<DVector<f64>> = epsilon_net(1.0, d, config.net_xi, 100_000)?
        .points
        .into_iter()
        .filter(|p| p.iter().any(|&x| x != 0.0))
        .map(DVector::from_vec)
        .collect();

    let zero = vec![0.0; d];
    let mut stages: Vec<Option<StageSet>> = vec![None; horizon + 1];
    stages[horizon] = Some(StageSet {
        anchors: vec![zero.clone()],
        members: vec![zero.clone()],
        kinds: vec![MemberKind::Anchor],
        combos_total: 1,
        combos_used: 1,
    });
    // clipped values of every retained member, per stage
    let mut member_values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); horizon + 1];
    let mut empty_stage = None;

    for h in (0..horizon).rev() {
        let cov = &data.covariances[h];
        let w = &data.solve_maps[h];
        // stop distributions of every trajectory started after stage h
        let mut reward_part = vec![0.0; data.n];
        let mut coeff = vec![vec![0.0; data.n]; horizon + 1];
        for j in 0..data.n {
            let om: Vec<f64> = (0..=horizon).map(|k| omegas[k][j]).collect();
            let dist = stop_distribution_from_omegas(h, &om);
            let mut partial = data.rewards[h][j];
            for (i, p) in dist.probs.iter().enumerate() {
                let t = h + 1 + i;
                reward_part[j] += p * partial;
                coeff[t][j] = *p;
                partial += data.rewards[t][j];
            }
        }
        let base = w * DVector::from_vec(reward_part);
        let tail_stages: Vec<usize> = (h + 1..horizon).collect();
        // anchor contribution of each (tail stage, member)
        let contrib: Vec<Vec<DVector<f64>>> = tail_stages
            .iter()
            .map(|&t| {
                member_values[t]
                    .iter()
                    .map(|vals| {
                        let y: Vec<f64> = vals.iter().zip(&coeff[t]).map(|(v, c)| v * c).collect();
                        w * DVector::from_vec(y)
                    })
                    .collect()
            })
            .collect();
        let radices: Vec<usize> = contrib.iter().map(|c| c.len()).collect();
        let (combos_total, combos) =
            tail_combos(&radices, config.combo_cap, config.seed ^ ((h as u64) << 32));
        let anchors: Vec<Vec<f64>> = combos
            .iter()
            .map(|combo| {
                let mut a = base.clone();
                for (i, &m) in combo.iter().enumerate() {
                    a += &contrib[i][m];
                }
                a.iter().copied().collect()
            })
            .collect();

        let mut members = Vec::new();
        let mut kinds = Vec::new();
        for a in &anchors {
            if crate::linalg::norm(a) <= config.theta_radius {
                members.push(a.clone());
                kinds.push(MemberKind::Anchor);
            }
        }
        if let Some(diag) = diagnostics {
            if passes_ellipsoid(&diag[h], &anchors, cov, config) {
                members.push(diag[h].clone());
                kinds.push(MemberKind::Diagnostic);
            }
        }
        // local candidates just inside each anchor's ellipsoid, nearest to the anchors first
        let scale = config.beta * (1.0 - 1e-9);
        let mut local: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        for a in &anchors {
            let av = to_dvec(a);
            for u in &unit_net {
                let cand = &av + cov.unwhiten(u) * scale;
                let cand: Vec<f64> = cand.iter().copied().collect();
                if crate::linalg::norm(&cand) > config.theta_radius {
                    continue;
                }
                let dist = ellipsoid_distance(&cand, &anchors, cov);
                if dist <= config.beta {
                    local.push((dist, local.len(), cand));
                }
            }
        }
        local.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (_, _, cand) in local.into_iter().take(config.grid_per_stage) {
            members.push(cand);
            kinds.push(MemberKind::Local);
        }
        if members.is_empty() && empty_stage.is_none() {
            empty_stage = Some(h);
        }
        if h > 0 {
            member_values[h] = members.iter().map(|m| data.clipped_values(h, m)).collect();
        }
        stages[h] = Some(StageSet {
            anchors,
            members,
            kinds,
            combos_total,
            combos_used: combos.len(),
        });
        if empty_stage.is_some() {
            // nothing to bootstrap from; earlier stages stay empty
            for k in (0..h).rev() {
                stages[k] = Some(StageSet {
                    anchors: Vec::new(),
                    members: Vec::new(),
                    kinds: Vec::new(),
                    combos_total: 0,
                    combos_used: 0,
                });
            }
            break;
        }
    }
    Ok(ConfidenceSetApprox {
        stages: stages.into_iter().map(|s| s.expect("filled")).collect(),
        empty_stage,
    })
}

pub fn build_confidence_sets(
    dataset: &Dataset,
    guess: &Guess,
    config: &LearnerConfig,
) -> Result<ConfidenceSetApprox> {
    let data = PreparedData::new(dataset, config.lambda)?;
    build_confidence_sets_prepared(&data, guess, config, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessReport {
    pub index: usize,
    pub feasible: bool,
    /// Tightness per stage `0..H` (empty stages report `None`).
    pub tightness: Vec<Option<f64>>,
    pub empty_stage: Option<usize>,
    /// Best clipped start value over the stage-0 pool.
    pub optimistic_value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Solved,
    AllGuessesRejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub chosen_guess: Option<usize>,
    /// Selected parameters for stages `0..=H`; empty when every guess was rejected.
    pub theta: Vec<Vec<f64>>,
    pub optimistic_value: Option<f64>,
    pub guesses: Vec<GuessReport>,
    pub policy: Option<Policy>,
}

impl SolveOutcome {
    pub fn feasible_count(&self) -> usize {
        self.guesses.iter().filter(|g| g.feasible).count()
    }

    pub fn tightness_max(&self) -> f64 {
        self.guesses
            .iter()
            .flat_map(|g| g.tightness.iter().flatten())
            .cloned()
            .fold(0.0, f64::max)
    }
}

struct GuessSolve {
    report: GuessReport,
    sets: ConfidenceSetApprox,
    best_member: Option<usize>,
}

fn solve_one(
    data: &PreparedData,
    index: usize,
    guess: &Guess,
    config: &LearnerConfig,
    start_rows: &[Vec<f64>],
) -> Result<GuessSolve> {
    let sets = build_confidence_sets_prepared(data, guess, config, None)?;
    let tight: Vec<Option<f64>> = (0..data.horizon)
        .map(|h| {
            let m = sets.members(h);
            (!m.is_empty()).then(|| data.tightness(h, m))
        })
        .collect();
    let feasible = sets.empty_stage.is_none()
        && tight
            .iter()
            .all(|t| matches!(t, Some(x) if *x <= config.eps_bar));
    let hf = data.horizon as f64;
    let values: Vec<f64> = sets
        .members(0)
        .iter()
        .map(|th| clipped_v_rows(th, start_rows, hf))
        .collect();
    let best_member = (!values.is_empty()).then(|| argmax(&values));
    Ok(GuessSolve {
        report: GuessReport {
            index,
            feasible,
            tightness: tight,
            empty_stage: sets.empty_stage,
            optimistic_value: best_member.map(|i| values[i]),
        },
        sets,
        best_member,
    })
}

/// Greedy policy in the clipped q-estimates of `theta` (ties to the lowest action).
pub fn greedy_policy(mdp: &StagedMdp, fm: &FeatureMap, theta: &[Vec<f64>]) -> Result<Policy> {
    let actions: Vec<Vec<usize>> = (0..=mdp.horizon)
        .map(|k| {
            (0..mdp.stage_sizes[k])
                .map(|s| {
                    let qs: Vec<f64> = (0..mdp.num_actions)
                        .map(|a| clipped_q(&theta[k], fm, k, s, a))
                        .collect();
                    argmax(&qs)
                })
                .collect()
        })
        .collect();
    Policy::deterministic(mdp, &actions)
}

/// Solves the finite-pool problem over `guesses` and returns the greedy policy.
pub fn solve(
    dataset: &Dataset,
    guesses: &[Guess],
    config: &LearnerConfig,
    mdp: &StagedMdp,
    fm: &FeatureMap,
) -> Result<SolveOutcome> {
    if guesses.is_empty() {
        return Err(Error::Domain("need at least one guess candidate".into()));
    }
    config.validate()?;
    let data = PreparedData::new(dataset, config.lambda)?;
    if data.horizon != mdp.horizon || data.d != fm.d {
        return Err(Error::Structure(
            "dataset does not match the mdp/feature map".into(),
        ));
    }
    let start_rows = &fm.phi[0][0];
    let solved: Result<Vec<GuessSolve>> = guesses
        .par_iter()
        .enumerate()
        .map(|(i, g)| solve_one(&data, i, g, config, start_rows))
        .collect();
    let solved = solved?;
    let reports: Vec<GuessReport> = solved.iter().map(|s| s.report.clone()).collect();

    let mut chosen: Option<(usize, f64)> = None;
    for s in solved.iter().filter(|s| s.report.feasible) {
        let v = s
            .report
            .optimistic_value
            .expect("feasible guesses have members");
        if chosen.is_none_or(|(_, best)| v > best) {
            chosen = Some((s.report.index, v));
        }
    }
    let Some((gi, value)) = chosen else {
        return Ok(SolveOutcome {
            status: SolveStatus::AllGuessesRejected,
            chosen_guess: None,
            theta: Vec::new(),
            optimistic_value: None,
            guesses: reports,
            policy: None,
        });
    };
    let s = &solved[gi];
    let mut theta = Vec::with_capacity(mdp.horizon + 1);
    theta.push(s.sets.members(0)[s.best_member.expect("feasible")].clone());
    for h in 1..=mdp.horizon {
        theta.push(s.sets.members(h)[0].clone());
    }
    let policy = greedy_policy(mdp, fm, &theta)?;
    Ok(SolveOutcome {
        status: SolveStatus::Solved,
        chosen_guess: Some(gi),
        theta,
        optimistic_value: Some(value),
        guesses: reports,
        policy: Some(policy),
    })
}

/// Optimal policy of the skipping problem induced by `guess`: at each state
/// the behavior policy with probability `omega`, else greedy in its own q.
/// Built backward from the terminal stage.
pub fn pi_star_g(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    guess: &Guess,
    behavior: &Policy,
    params: &SkipParams,
) -> Result<(Policy, ValueTables)> {
    behavior.validate_for(mdp)?;
    fm.check_against(mdp)?;
    let h = mdp.horizon;
    let na = mdp.num_actions;
    let mut q = vec![Vec::new(); h + 1];
    let mut v = vec![Vec::new(); h + 1];
    let mut probs = vec![Vec::new(); h + 1];
    for k in (0..=h).rev() {
        for s in 0..mdp.stage_sizes[k] {
            let qs: Vec<f64> = (0..na)
                .map(|a| {
                    if k == h {
                        0.0
                    } else {
                        mdp.reward_means[k][s][a]
                            + mdp.transitions[k][s][a]
                                .iter()
                                .zip(&v[k + 1])
                                .map(|(p, x)| p * x)
                                .sum::<f64>()
                    }
                })
                .collect();
            let w = omega(guess, fm, k, s, params);
            let best = argmax(&qs);
            let row: Vec<f64> = (0..na)
                .map(|a| behavior.action_probs[k][s][a] * w + if a == best { 1.0 - w } else { 0.0 })
                .collect();
            v[k].push(qs.iter().zip(&row).map(|(x, p)| x * p).sum());
            q[k].push(qs);
            probs[k].push(row);
        }
    }
    Ok((
        Policy {
            action_probs: probs,
        },
        ValueTables { q, v },
    ))
}

/// Fitted parameters of `pi_star_g` at every stage.
pub fn psi_pi_star_g(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    guess: &Guess,
    behavior: &Policy,
    params: &SkipParams,
) -> Result<Vec<Vec<f64>>> {
    let (pi, _) = pi_star_g(mdp, fm, guess, behavior, params)?;
    Ok(fit_psi(mdp, fm, &pi)?.theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// `min_anchor ||psi_h - anchor||_{X_h}` per stage `0..=H`.
    pub distances: Vec<f64>,
    pub passed: Vec<bool>,
    pub all_passed: bool,
    /// Tightness of the pool (including the tested parameters) per stage `0..H`.
    pub tightness: Vec<f64>,
    pub feasible: bool,
}

/// Builds the sets for `guess` with `psi` inserted as diagnostics and tests every stage.
pub fn membership_check(
    data: &PreparedData,
    guess: &Guess,
    psi: &[Vec<f64>],
    config: &LearnerConfig,
) -> Result<MembershipReport> {
    let sets = build_confidence_sets_prepared(data, guess, config, Some(psi))?;
    let mut distances = Vec::with_capacity(data.horizon + 1);
    let mut passed = Vec::with_capacity(data.horizon + 1);
    for h in 0..data.horizon {
        let dist = ellipsoid_distance(&psi[h], &sets.stages[h].anchors, &data.covariances[h]);
        distances.push(dist);
        passed.push(crate::linalg::norm(&psi[h]) <= config.theta_radius && dist <= config.beta);
    }
    let terminal_ok = psi[data.horizon].iter().all(|&x| x == 0.0);
    distances.push(if terminal_ok { 0.0 } else { f64::INFINITY });
    passed.push(terminal_ok);
    let tightness: Vec<f64> = (0..data.horizon)
        .map(|h| data.tightness(h, sets.members(h)))
        .collect();
    let feasible = sets.empty_stage.is_none() && tightness.iter().all(|&t| t <= config.eps_bar);
    Ok(MembershipReport {
        all_passed: passed.iter().all(|&p| p),
        distances,
        passed,
        tightness,
        feasible,
    })
}

/// Largest `||anchor_h - psi_h||_{X_h}` over stages when each anchor is built
/// from the exact tail `psi_{h+1..=H}`.
pub fn true_tail_anchor_distance(
    dataset: &Dataset,
    guess: &Guess,
    psi: &[Vec<f64>],
    config: &LearnerConfig,
) -> Result<f64> {
    let horizon = psi.len() - 1;
    let mut worst: f64 = 0.0;
    for h in 0..horizon {
        let anchor = lstsq_anchor(dataset, h, guess, &psi[h + 1..], config)?;
        let cov = stage_covariance(dataset, h, config.lambda)?;
        let diff = to_dvec(&anchor) - to_dvec(&psi[h]);
        worst = worst.max(cov.norm(&diff));
    }
    Ok(worst)
}

/// Nearest-rank empirical quantile.
pub fn quantile(values: &[f64], level: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: f64,
    pub eps_bar: f64,
    pub delta: f64,
    pub replicates: usize,
    pub beta_samples: Vec<f64>,
    pub tightness_samples: Vec<f64>,
}

/// Sets `beta` to the `(1 - delta)`-quantile of the true-tail anchor error of
/// the guess-optimal policy's parameters over held-out datasets, and `eps_bar`
/// to twice the same quantile of the true guess's worst-stage tightness.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    mdp: &StagedMdp,
    fm: &FeatureMap,
    behavior: &Policy,
    true_guess: &Guess,
    n: usize,
    base: &LearnerConfig,
    replicates: usize,
    delta: f64,
    seed: u64,
) -> Result<Calibration> {
    if replicates == 0 || n == 0 {
        return Err(Error::Config(
            "calibration needs at least one replicate and one trajectory".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config("calibration delta must lie in (0, 1)".into()));
    }
    let params = base.skip_params(fm.d)?;
    let psi = psi_pi_star_g(mdp, fm, true_guess, behavior, &params)?;
    let datasets: Result<Vec<Dataset>> = (0..replicates)
        .map(|r| collect_dataset(mdp, fm, behavior, n, calibration_seed(seed, r)))
        .collect();
    let datasets = datasets?;
    let beta_samples: Result<Vec<f64>> = datasets
        .par_iter()
        .map(|ds| true_tail_anchor_distance(ds, true_guess, &psi, base))
        .collect();
    let beta_samples = beta_samples?;
    let beta = quantile(&beta_samples, 1.0 - delta);
    let cfg = LearnerConfig {
        beta,
        ..base.clone()
    };
    let tightness_samples: Result<Vec<f64>> = datasets
        .par_iter()
        .map(|ds| {
            let data = PreparedData::new(ds, cfg.lambda)?;
            let sets = build_confidence_sets_prepared(&data, true_guess, &cfg, None)?;
            Ok((0..data.horizon)
                .map(|h| data.tightness(h, sets.members(h)))
                .fold(0.0, f64::max))
        })
        .collect();
    let tightness_samples = tightness_samples?;
    let eps_bar = 2.0 * quantile(&tightness_samples, 1.0 - delta);
    Ok(Calibration {
        beta,
        eps_bar,
        delta,
        replicates,
        beta_samples,
        tightness_samples,
    })
}

/// Seeds of held-out calibration datasets; disjoint from small experiment seeds.
pub fn calibration_seed(seed: u64, replicate: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (0xCA11_B000_0000_0000 | replicate as u64)
}

/// Constants of the theoretical parameter table, evaluated literally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub alpha: f64,
    pub d0: usize,
    /// Enlarged parameter bound `L2 (8 H^2 d0 / alpha + 1)`.
    pub l2_bar: f64,
    pub sqrt_lambda: f64,
    pub lambda: f64,
    pub eta_bar: f64,
    pub eps_check: f64,
    pub beta_bar: f64,
    pub beta: f64,
    pub eps_bar: f64,
    pub eps_tilde: f64,
    /// `ln(1/xi)` for the cover scale used in the tightness bound.
    pub ln_inv_xi: f64,
    pub xi_bar: f64,
    /// `ln` of the guess-cover cardinality bound `(1 + 2 L_G / xi)^{d H d0}`.
    pub ln_cover_cardinality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub d: usize,
    pub horizon: usize,
    pub eps: f64,
    pub delta: f64,
    pub l1: f64,
    pub l2: f64,
    pub eta: f64,
    pub c_conc: f64,
    pub n: usize,
}

/// `L2 (8 H^2 d0 / alpha + 1)`: the parameter bound that covers every tail value function.
pub fn enlarged_radius(l2: f64, horizon: usize, d: usize, alpha: f64) -> f64 {
    let hf = horizon as f64;
    l2 * (8.0 * hf * hf * d_zero(d) as f64 / alpha + 1.0)
}

/// `sqrt(lambda) = H^{3/2} d / l2_bar`.
pub fn sqrt_lambda(horizon: usize, d: usize, l2_bar: f64) -> f64 {
    (horizon as f64).powf(1.5) * d as f64 / l2_bar
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn derived_constants(inp: &TheoryInputs) -> Result<DerivedConstants> {
    let TheoryInputs {
        d,
        horizon,
        eps,
        delta,
        l1,
        l2,
        eta,
        c_conc,
        n,
    } = *inp;
    if d == 0
        || horizon == 0
        || n == 0
        || !(eps > 0.0)
        || !(delta > 0.0)
        || !(l1 > 0.0)
        || !(l2 > 0.0)
        || eta < 0.0
        || c_conc < 1.0
    {
        return Err(Error::Domain(
            "theory inputs must be positive (eta >= 0, C >= 1)".into(),
        ));
    }
    let (df, hf, nf) = (d as f64, horizon as f64, n as f64);
    let d0 = d_zero(d);
    let d0f = d0 as f64;
    let alpha = eps / (12.0 * (hf + 1.0));
    let l2_bar = enlarged_radius(l2, horizon, d, alpha);
    let sl = sqrt_lambda(horizon, d, l2_bar);
    let lambda = sl * sl;
    let eta_bar = eta * (10.0 * hf * hf * d0f / alpha + 1.0);
    // the guess ball radius is taken equal to L2
    let l_g = l2;
    let sqrt2d = (2.0 * df).sqrt();

    let eps_check = df.sqrt() / nf.sqrt()
        + ((df * df * (16.0 * nf * l1 * l1 * l2_bar.powi(3)).ln_1p() + (3.0 * hf / delta).ln())
            .sqrt())
            / nf.sqrt()
        + (2.0 * df / nf * ((df * lambda + nf * l1 * l1) / (df * lambda)).ln()).sqrt();

    let beta_bar = hf
        * (2.0
            * df
            * hf
            * (d0f + 1.0)
            * (28.0 * sqrt2d * hf * hf * l_g * l2_bar * l1 / alpha).ln_1p()
            + df * (lambda + nf * l1 * l1 / df).ln()
            - df * lambda.ln()
            + (3.0 * hf / delta).ln())
        .sqrt()
        + 1.0;
    let beta = hf.powf(1.5) * df + eta_bar * nf.sqrt() + beta_bar;

    let inner =
        96.0 * sqrt2d * hf * hf * l1 * l_g / alpha * nf.sqrt() * l1 * l2_bar / (hf.powf(1.5) * df);
    let eps_bar = hf / nf.sqrt()
        * (df * hf * hf * d0f * (nf.sqrt() * inner).ln_1p() + (6.0 * hf / delta).ln()).sqrt()
        + 1.0 / nf.sqrt()
        + hf * eta_bar
        + 4.0 * hf * c_conc * eps_check * beta;
    let eps_tilde = c_conc
        * (hf / nf.sqrt() * (df * hf * hf * d0f * inner.ln_1p() + (6.0 * hf / delta).ln()).sqrt()
            + 1.0 / nf.sqrt()
            + eps_bar);

    let growth = (2.0 * nf.sqrt() * l1 * l2_bar / (hf.powf(1.5) * df)).ln();
    let ln_inv_xi = (24.0 * nf.sqrt() * sqrt2d * hf * hf * l1 / alpha).ln() + hf * growth;
    let ln_xi_bar = (12.0 * sqrt2d * hf * hf * l1 / alpha).ln() - ln_inv_xi + hf * growth;
    let ln_cover_cardinality = df * hf * d0f * softplus((2.0 * l_g).ln() + ln_inv_xi);

    Ok(DerivedConstants {
        alpha,
        d0,
        l2_bar,
        sqrt_lambda: sl,
        lambda,
        eta_bar,
        eps_check,
        beta_bar,
        beta,
        eps_bar,
        eps_tilde,
        ln_inv_xi,
        xi_bar: ln_xi_bar.exp(),
        ln_cover_cardinality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_true_guess, guess_grid};
    use crate::envs::{gen_linear_mdp, policy_sample, uniform_stage_sizes};
    use crate::mdp::{optimal_policy, RewardKind};

    fn instance(seed: u64) -> (StagedMdp, FeatureMap, Policy, Guess) {
        let (mdp, fm) = gen_linear_mdp(
            2,
            &uniform_stage_sizes(3, 3),
            2,
            RewardKind::DeterministicMean,
            seed,
        )
        .unwrap();
        let behavior = Policy::uniform(&mdp);
        let (policies, _) = policy_sample(&mdp, 64, seed);
        let guess = build_true_guess(&mdp, &fm, &policies).unwrap();
        (mdp, fm, behavior, guess)
    }

    fn config() -> LearnerConfig {
        LearnerConfig {
            beta: 0.5,
            eps_bar: 10.0,
            alpha: 0.2,
            grid_per_stage: 4,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn alpha_and_lambda_examples() {
        let c = derived_constants(&TheoryInputs {
            d: 2,
            horizon: 11,
            eps: 1.2,
            delta: 0.1,
            l1: 1.0,
            l2: 1.0,
            eta: 0.0,
            c_conc: 1.0,
            n: 1000,
        })
        .unwrap();
        assert!((c.alpha - 1.2 / 144.0).abs() < 1e-15);
        assert_eq!(c.eta_bar, 0.0);
        assert!(c.beta > c.beta_bar && c.eps_bar > 0.0 && c.eps_tilde > c.eps_bar);
        assert!((sqrt_lambda(4, 2, 16.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cover_scale_makes_xi_bar_half_inverse_root_n() {
        let inp = TheoryInputs {
            d: 3,
            horizon: 4,
            eps: 0.5,
            delta: 0.05,
            l1: 1.0,
            l2: 2.0,
            eta: 0.01,
            c_conc: 2.0,
            n: 400,
        };
        let c = derived_constants(&inp).unwrap();
        assert!((c.xi_bar - 1.0 / 40.0).abs() < 1e-12);
        assert!(c.eta_bar > 0.0);
        assert!(derived_constants(&TheoryInputs { c_conc: 0.5, ..inp }).is_err());
    }

    #[test]
    fn clip_applies_after_max() {
        let fm = FeatureMap::new(
            1,
            vec![
                vec![vec![vec![-3.0], vec![2.0]]],
                vec![vec![vec![0.0], vec![0.0]]],
            ],
        )
        .unwrap();
        assert_eq!(clipped_q(&[1.0], &fm, 0, 0, 0), 0.0);
        assert_eq!(clipped_v(&[1.0], &fm, 0, 0), 1.0);
        assert_eq!(clipped_v(&[-1.0], &fm, 0, 0), 1.0);
        assert_eq!(clipped_v(&[0.1], &fm, 0, 0), 0.2);
    }

    #[test]
    fn anchor_matches_normal_equations() {
        let (mdp, fm, behavior, guess) = instance(3);
        let ds = collect_dataset(&mdp, &fm, &behavior, 200, 9).unwrap();
        let cfg = config();
        let params = cfg.skip_params(2).unwrap();
        let tail = vec![vec![0.3, 0.7], vec![0.0, 0.0]];
        let anchor = lstsq_anchor(&ds, 1, &guess, &tail, &cfg).unwrap();
        let y = anchor_targets(&ds, 1, &guess, &tail, &params);
        let mut a = DMatrix::identity(2, 2) * cfg.lambda;
        let mut b = DVector::zeros(2);
        for (t, yj) in ds.trajectories.iter().zip(&y) {
            let f = to_dvec(t.taken_feature(1));
            a += &f * f.transpose();
            b += f * *yj;
        }
        let direct = a.lu().solve(&b).unwrap();
        for i in 0..2 {
            assert!((anchor[i] - direct[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pooled_anchors_match_direct_solve() {
        let (mdp, fm, behavior, guess) = instance(4);
        let ds = collect_dataset(&mdp, &fm, &behavior, 150, 2).unwrap();
        let cfg = config();
        let data = PreparedData::new(&ds, cfg.lambda).unwrap();
        let sets = build_confidence_sets_prepared(&data, &guess, &cfg, None).unwrap();
        assert_eq!(sets.stages[3].members, vec![vec![0.0, 0.0]]);
        // combos at stage 0 enumerate stage-1 and stage-2 members, stage 1 fastest
        let s1 = &sets.stages[1].members;
        let s2 = &sets.stages[2].members;
        assert_eq!(sets.stages[0].combos_total as usize, s1.len() * s2.len());
        for (idx, anchor) in sets.stages[0].anchors.iter().enumerate().step_by(7) {
            let tail = vec![
                s1[idx % s1.len()].clone(),
                s2[idx / s1.len()].clone(),
                vec![0.0, 0.0],
            ];
            let direct = lstsq_anchor(&ds, 0, &guess, &tail, &cfg).unwrap();
            for i in 0..2 {
                assert!((anchor[i] - direct[i]).abs() < 1e-10);
            }
        }
        for h in 0..3 {
            let set = &sets.stages[h];
            for m in &set.members {
                assert!(passes_ellipsoid(
                    m,
                    &set.anchors,
                    &data.covariances[h],
                    &cfg
                ));
            }
            assert!(
                set.kinds
                    .iter()
                    .filter(|k| **k == MemberKind::Local)
                    .count()
                    <= cfg.grid_per_stage
            );
        }
    }

    #[test]
    fn tightness_of_singleton_is_zero() {
        let (mdp, fm, behavior, _) = instance(5);
        let ds = collect_dataset(&mdp, &fm, &behavior, 50, 1).unwrap();
        assert_eq!(tightness(&ds, 1, &[vec![0.4, 0.1]]).unwrap(), 0.0);
        let t = tightness(&ds, 1, &[vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        let data = PreparedData::new(&ds, 1.0).unwrap();
        assert!((data.tightness(1, &[vec![0.0, 0.0], vec![10.0, 10.0]]) - t).abs() < 1e-12);
        assert!(tightness(&ds, 1, &[]).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(stage_covariance(
            &Dataset {
                trajectories: vec![]
            },
            0,
            1.0
        )
        .is_err());
    }

    #[test]
    fn solve_reports_rejection_explicitly() {
        let (mdp, fm, behavior, guess) = instance(6);
        let ds = collect_dataset(&mdp, &fm, &behavior, 100, 3).unwrap();
        let cfg = LearnerConfig {
            eps_bar: 1e-12,
            ..config()
        };
        let out = solve(&ds, std::slice::from_ref(&guess), &cfg, &mdp, &fm).unwrap();
        assert_eq!(out.status, SolveStatus::AllGuessesRejected);
        assert!(out.policy.is_none() && out.chosen_guess.is_none());
        assert_eq!(out.guesses.len(), 1);
        assert!(solve(&ds, &[], &cfg, &mdp, &fm).is_err());
    }

    #[test]
    fn solve_is_deterministic_and_returns_policy() {
        let (mdp, fm, behavior, guess) = instance(7);
        let ds = collect_dataset(&mdp, &fm, &behavior, 300, 5).unwrap();
        let grid = guess_grid(&guess, 0.5, 4, 1);
        let cfg = config();
        let a = solve(&ds, &grid, &cfg, &mdp, &fm).unwrap();
        let b = solve(&ds, &grid, &cfg, &mdp, &fm).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.status, SolveStatus::Solved);
        let pi = a.policy.unwrap();
        pi.validate_for(&mdp).unwrap();
        assert_eq!(a.theta.len(), 4);
    }

    #[test]
    fn zero_guess_follows_behavior_inside() {
        let (mdp, fm, behavior, _) = instance(8);
        let params = SkipParams::new(0.2, 2).unwrap();
        let zero = Guess::zeros(3, 2, 1.0);
        let (pi, vals) = pi_star_g(&mdp, &fm, &zero, &behavior, &params).unwrap();
        for k in 1..3 {
            assert_eq!(pi.action_probs[k], behavior.action_probs[k]);
        }
        let opt = optimal_policy(&mdp).unwrap().1;
        assert!(vals.start_value() <= opt.start_value() + 1e-12);
        let ev = crate::mdp::evaluate_policy(&mdp, &pi).unwrap();
        assert!((ev.start_value() - vals.start_value()).abs() < 1e-12);
    }

    #[test]
    fn true_parameters_are_members_with_generous_beta() {
        let (mdp, fm, behavior, guess) = instance(9);
        let cfg = config();
        let params = cfg.skip_params(2).unwrap();
        let psi = psi_pi_star_g(&mdp, &fm, &guess, &behavior, &params).unwrap();
        let ds = collect_dataset(&mdp, &fm, &behavior, 400, 8).unwrap();
        let dist = true_tail_anchor_distance(&ds, &guess, &psi, &cfg).unwrap();
        let data = PreparedData::new(&ds, cfg.lambda).unwrap();
        let rep = membership_check(
            &data,
            &guess,
            &psi,
            &LearnerConfig {
                beta: dist + 1e-9,
                ..cfg
            },
        )
        .unwrap();
        assert!(rep.all_passed, "{rep:?}");
    }

    #[test]
    fn quantile_nearest_rank() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn tail_combos_subsample_is_seeded() {
        let (total, all) = tail_combos(&[3, 4], 100, 0);
        assert_eq!(total, 12);
        assert_eq!(all.len(), 12);
        assert_eq!(all[1], vec![1, 0]);
        let (_, a) = tail_combos(&[10, 10, 10], 20, 5);
        let (_, b) = tail_combos(&[10, 10, 10], 20, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }
}
