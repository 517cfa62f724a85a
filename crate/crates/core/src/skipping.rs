//! Guess-induced ranges, skipping probabilities and skip-aware regression targets.
//!
//! A state is skipped with probability `omega`, which is 1 when its guessed
//! range is at most `alpha / sqrt(2d)`, 0 at or above twice that, and linear in
//! between. The start and terminal stages are never skipped.

use serde::{Deserialize, Serialize};

use crate::design::Guess;
use crate::envs::{action_spread, FeatureMap};
use crate::error::{Error, Result};
use crate::mdp::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipParams {
    pub alpha: f64,
    pub d: usize,
}

impl SkipParams {
    pub fn new(alpha: f64, d: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if d == 0 {
            return Err(Error::Domain("d must be at least 1".into()));
        }
        Ok(Self { alpha, d })
    }

    /// `alpha / sqrt(2d)`: ranges at or below this are always skipped.
    pub fn threshold(&self) -> f64 {
        self.alpha / (2.0 * self.d as f64).sqrt()
    }
}

/// Guessed range from the feature rows of one state.
pub fn range_from_rows(panel: &[Vec<f64>], rows: &[Vec<f64>]) -> f64 {
    panel
        .iter()
        .map(|v| action_spread(rows, v))
        .fold(0.0, f64::max)
}

pub fn range_g(guess: &Guess, fm: &FeatureMap, stage: usize, state: usize) -> Result<f64> {
    let horizon = fm.phi.len() - 1;
    if stage == 0 || stage >= horizon {
        return Err(Error::Domain(format!(
            "guessed range is defined for stages 1..{horizon}, got {stage}"
        )));
    }
    let rows = fm
        .phi
        .get(stage)
        .and_then(|s| s.get(state))
        .ok_or_else(|| Error::Domain(format!("state {state} not in stage {stage}")))?;
    Ok(range_from_rows(guess.panel(stage), rows))
}

/// Skip probability for a given guessed range at an interior stage.
pub fn omega_from_range(range: f64, params: &SkipParams) -> f64 {
    let scaled = (2.0 * params.d as f64).sqrt() * range / params.alpha;
    if scaled <= 1.0 {
        1.0
    } else if scaled >= 2.0 {
        0.0
    } else {
        2.0 - scaled
    }
}

/// Skip probability of a state given its stage and feature rows.
pub fn omega_at(
    guess: &Guess,
    horizon: usize,
    stage: usize,
    rows: &[Vec<f64>],
    params: &SkipParams,
) -> f64 {
    if stage == 0 || stage >= horizon {
        return 0.0;
    }
    omega_from_range(range_from_rows(guess.panel(stage), rows), params)
}

pub fn omega(
    guess: &Guess,
    fm: &FeatureMap,
    stage: usize,
    state: usize,
    params: &SkipParams,
) -> f64 {
    let horizon = fm.phi.len() - 1;
    omega_at(guess, horizon, stage, &fm.phi[stage][state], params)
}

/// Distribution of the first non-skipped stage after `h`, supported on `h+1..=horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopDistribution {
    pub first_stage: usize,
    pub probs: Vec<f64>,
}

impl StopDistribution {
    pub fn prob(&self, stage: usize) -> f64 {
        stage
            .checked_sub(self.first_stage)
            .and_then(|i| self.probs.get(i))
            .copied()
            .unwrap_or(0.0)
    }
}

/// `F(t) = (1 - omega_t) prod_{u=h+1}^{t-1} omega_u` from per-stage skip probabilities.
pub fn stop_distribution_from_omegas(h: usize, omegas: &[f64]) -> StopDistribution {
    let horizon = omegas.len() - 1;
    let mut probs = Vec::with_capacity(horizon - h);
    let mut survive = 1.0;
    for t in h + 1..=horizon {
        probs.push((1.0 - omegas[t]) * survive);
        survive *= omegas[t];
    }
    StopDistribution {
        first_stage: h + 1,
        probs,
    }
}

/// Skip probabilities of the states visited by `traj`, indexed by stage.
pub fn trajectory_omegas(
    guess: &Guess,
    fm: &FeatureMap,
    traj: &Trajectory,
    params: &SkipParams,
) -> Vec<f64> {
    let horizon = traj.horizon();
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, step)| omega_at(guess, horizon, t, &fm.phi[t][step.state], params))
        .collect()
}

pub fn stop_distribution(
    guess: &Guess,
    fm: &FeatureMap,
    traj: &Trajectory,
    h: usize,
    params: &SkipParams,
) -> Result<StopDistribution> {
    if h >= traj.horizon() {
        return Err(Error::Domain(format!("stage {h} has no successor")));
    }
    Ok(stop_distribution_from_omegas(
        h,
        &trajectory_omegas(guess, fm, traj, params),
    ))
}

/// `sum_t F(t) (r_h + ... + r_{t-1} + f_t)` with per-stage rewards, skip
/// probabilities and successor values along one path.
pub fn expected_skip_return(h: usize, rewards: &[f64], omegas: &[f64], values: &[f64]) -> f64 {
    let dist = stop_distribution_from_omegas(h, omegas);
    let mut partial = rewards[h];
    let mut total = 0.0;
    for (i, p) in dist.probs.iter().enumerate() {
        let t = h + 1 + i;
        total += p * (partial + values[t]);
        partial += rewards[t];
    }
    total
}

/// Skip-aware target along a recorded trajectory for the tabular value function `f[k][s]`.
pub fn skip_target(
    guess: &Guess,
    fm: &FeatureMap,
    traj: &Trajectory,
    h: usize,
    f: &[Vec<f64>],
    params: &SkipParams,
) -> Result<f64> {
    let horizon = traj.horizon();
    if h >= horizon {
        return Err(Error::Domain(format!("stage {h} has no successor")));
    }
    check_value_function(f, horizon)?;
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = traj
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| f[t][s.state])
        .collect();
    let omegas = trajectory_omegas(guess, fm, traj, params);
    Ok(expected_skip_return(h, &rewards, &omegas, &values))
}

/// `f` must map into `[0, H]` and vanish at the terminal state.
pub fn check_value_function(f: &[Vec<f64>], horizon: usize) -> Result<()> {
    if f.len() != horizon + 1 {
        return Err(Error::Contract(format!(
            "value function covers {} stages, need {}",
            f.len(),
            horizon + 1
        )));
    }
    let hf = horizon as f64;
    if let Some(x) = f.iter().flatten().find(|&&x| !(0.0..=hf).contains(&x)) {
        return Err(Error::Contract(format!("value {x} outside [0, {horizon}]")));
    }
    if f[horizon].iter().any(|&x| x != 0.0) {
        return Err(Error::Contract(
            "value at the terminal state must be 0".into(),
        ));
    }
    Ok(())
}
