//! Stage-structured finite-horizon MDPs.
//!
//! Stages are indexed from 0: stage 0 holds the single start state and stage
//! `horizon` holds the single terminal state. States are dense per-stage
//! indices, so stage membership is positional. Transitions only go from stage
//! `k` to stage `k + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::FeatureMap;
use crate::error::{Error, Result};

/// Tolerance for probability rows summing to one.
pub const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// The observed reward equals its mean.
    #[default]
    DeterministicMean,
    /// The observed reward is Bernoulli with the given mean.
    BernoulliMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedMdp {
    #[serde(rename = "H")]
    pub horizon: usize,
    /// `horizon + 1` entries; the first and last are 1.
    pub stage_sizes: Vec<usize>,
    pub num_actions: usize,
    /// `transitions[k][s][a]` is a distribution over the states of stage `k + 1`.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `reward_means[k][s][a]`, `k` in `0..=horizon`; the terminal stage is all zeros.
    pub reward_means: Vec<Vec<Vec<f64>>>,
    pub reward_kind: RewardKind,
}

impl StagedMdp {
    pub fn new(
        stage_sizes: Vec<usize>,
        num_actions: usize,
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        reward_means: Vec<Vec<Vec<f64>>>,
        reward_kind: RewardKind,
    ) -> Result<Self> {
        if stage_sizes.len() < 2 {
            return Err(Error::Structure("need at least two stages".into()));
        }
        let mdp = Self {
            horizon: stage_sizes.len() - 1,
            stage_sizes,
            num_actions,
            transitions,
            reward_means,
            reward_kind,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.horizon;
        if h == 0 {
            return Err(Error::Structure("horizon must be positive".into()));
        }
        if self.stage_sizes.len() != h + 1 {
            return Err(Error::Structure(format!(
                "expected {} stage sizes, got {}",
                h + 1,
                self.stage_sizes.len()
            )));
        }
        if self.stage_sizes[0] != 1 || self.stage_sizes[h] != 1 {
            return Err(Error::Structure(
                "start and terminal stages must hold exactly one state".into(),
            ));
        }
        if self.stage_sizes.contains(&0) {
            return Err(Error::Structure("empty stage".into()));
        }
        if self.num_actions == 0 {
            return Err(Error::Structure("need at least one action".into()));
        }
        if self.transitions.len() != h {
            return Err(Error::Structure(
                "transition table must cover stages 0..H".into(),
            ));
        }
        if self.reward_means.len() != h + 1 {
            return Err(Error::Structure(
                "reward table must cover stages 0..=H".into(),
            ));
        }
        for k in 0..=h {
            let rewards = &self.reward_means[k];
            if rewards.len() != self.stage_sizes[k] {
                return Err(Error::Structure(format!(
                    "reward table stage {k} has wrong size"
                )));
            }
            for (s, row) in rewards.iter().enumerate() {
                if row.len() != self.num_actions {
                    return Err(Error::Structure(format!(
                        "reward row ({k},{s}) has wrong length"
                    )));
                }
                for &r in row {
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Structure(format!(
                            "reward mean {r} at stage {k} state {s} outside [0,1]"
                        )));
                    }
                    if k == h && r != 0.0 {
                        return Err(Error::Structure("terminal rewards must be zero".into()));
                    }
                }
            }
        }
        for k in 0..h {
            let table = &self.transitions[k];
            if table.len() != self.stage_sizes[k] {
                return Err(Error::Structure(format!(
                    "transition stage {k} has wrong size"
                )));
            }
            for (s, per_action) in table.iter().enumerate() {
                if per_action.len() != self.num_actions {
                    return Err(Error::Structure(format!(
                        "transition entry ({k},{s}) has wrong action count"
                    )));
                }
                for (a, row) in per_action.iter().enumerate() {
                    if row.len() != self.stage_sizes[k + 1] {
                        return Err(Error::Structure(format!(
                            "transition row ({k},{s},{a}) has wrong length"
                        )));
                    }
                    check_distribution(row)
                        .map_err(|e| Error::Structure(format!("transition ({k},{s},{a}): {e}")))?;
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self, stage: usize) -> usize {
        self.stage_sizes[stage]
    }

    /// Total number of deterministic policies over the non-terminal stages, if it fits in u128.
    pub fn deterministic_policy_count(&self) -> Option<u128> {
        let decisions: u32 = self.stage_sizes[..self.horizon]
            .iter()
            .sum::<usize>()
            .try_into()
            .ok()?;
        (self.num_actions as u128).checked_pow(decisions)
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(format!("row sums to {total}"));
    }
    Ok(())
}

/// Memoryless policy: `action_probs[k][s]` is a distribution over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub action_probs: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    pub fn uniform(mdp: &StagedMdp) -> Self {
        let p = 1.0 / mdp.num_actions as f64;
        Self {
            action_probs: mdp
                .stage_sizes
                .iter()
                .map(|&n| vec![vec![p; mdp.num_actions]; n])
                .collect(),
        }
    }

    /// `actions[k][s]` is the chosen action; the terminal stage may be omitted (action 0).
    pub fn deterministic(mdp: &StagedMdp, actions: &[Vec<usize>]) -> Result<Self> {
        let mut action_probs = Vec::with_capacity(mdp.horizon + 1);
        for (k, &n) in mdp.stage_sizes.iter().enumerate() {
            let mut rows = Vec::with_capacity(n);
            for s in 0..n {
                let a = match actions.get(k) {
                    Some(stage) => *stage
                        .get(s)
                        .ok_or_else(|| Error::Structure(format!("missing action for ({k},{s})")))?,
                    None if k == mdp.horizon => 0,
                    None => return Err(Error::Structure(format!("missing actions for stage {k}"))),
                };
                if a >= mdp.num_actions {
                    return Err(Error::Structure(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; mdp.num_actions];
                row[a] = 1.0;
                rows.push(row);
            }
            action_probs.push(rows);
        }
        Ok(Self { action_probs })
    }

    /// Random stochastic policy with rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(mdp: &StagedMdp, rng: &mut R) -> Self {
        let action_probs = mdp
            .stage_sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| random_simplex(mdp.num_actions, rng))
                    .collect()
            })
            .collect();
        Self { action_probs }
    }

    /// Mixture `weight * self + (1 - weight) * other`.
    pub fn mix(&self, other: &Policy, weight: f64) -> Self {
        let action_probs = self
            .action_probs
            .iter()
            .zip(&other.action_probs)
            .map(|(sa, sb)| {
                sa.iter()
                    .zip(sb)
                    .map(|(ra, rb)| {
                        ra.iter()
                            .zip(rb)
                            .map(|(x, y)| weight * x + (1.0 - weight) * y)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { action_probs }
    }

    pub fn prob(&self, stage: usize, state: usize, action: usize) -> f64 {
        self.action_probs[stage][state][action]
    }

    pub fn validate_for(&self, mdp: &StagedMdp) -> Result<()> {
        if self.action_probs.len() != mdp.horizon + 1 {
            return Err(Error::Structure(format!(
                "policy covers {} stages, mdp has {}",
                self.action_probs.len(),
                mdp.horizon + 1
            )));
        }
        for (k, rows) in self.action_probs.iter().enumerate() {
            if rows.len() != mdp.stage_sizes[k] {
                return Err(Error::Structure(format!(
                    "policy stage {k} has wrong state count"
                )));
            }
            for (s, row) in rows.iter().enumerate() {
                if row.len() != mdp.num_actions {
                    return Err(Error::Structure(format!(
                        "policy row ({k},{s}) has wrong length"
                    )));
                }
                check_distribution(row)
                    .map_err(|e| Error::Structure(format!("policy row ({k},{s}): {e}")))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn random_simplex<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // push the rounding residue onto the largest entry so the row sums to 1 tightly
    let residue = 1.0 - row.iter().sum::<f64>();
    let imax = argmax(&row);
    row[imax] += residue;
    row
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Every deterministic policy of `mdp` in mixed-radix order (terminal stage fixed to action 0).
pub fn deterministic_policies(mdp: &StagedMdp) -> impl Iterator<Item = Policy> + '_ {
    let slots: usize = mdp.stage_sizes[..mdp.horizon].iter().sum();
    let total = mdp.deterministic_policy_count().unwrap_or(u128::MAX);
    let mut digits = vec![0usize; slots];
    let mut emitted: u128 = 0;
    std::iter::from_fn(move || {
        if emitted >= total {
            return None;
        }
        let mut actions = Vec::with_capacity(mdp.horizon);
        let mut idx = 0;
        for k in 0..mdp.horizon {
            actions.push(digits[idx..idx + mdp.stage_sizes[k]].to_vec());
            idx += mdp.stage_sizes[k];
        }
        let policy = Policy::deterministic(mdp, &actions).expect("digits are valid actions");
        emitted += 1;
        for d in digits.iter_mut() {
            *d += 1;
            if *d < mdp.num_actions {
                break;
            }
            *d = 0;
        }
        Some(policy)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub q: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<f64>>,
}

impl ValueTables {
    pub fn start_value(&self) -> f64 {
        self.v[0][0]
    }
}

fn next_value(row: &[f64], v_next: &[f64]) -> f64 {
    row.iter().zip(v_next).map(|(p, v)| p * v).sum()
}

/// Exact backward induction for `policy`.
pub fn evaluate_policy(mdp: &StagedMdp, policy: &Policy) -> Result<ValueTables> {
    policy.validate_for(mdp)?;
    let h = mdp.horizon;
    let mut q = vec![Vec::new(); h + 1];
    let mut v = vec![Vec::new(); h + 1];
    q[h] = vec![vec![0.0; mdp.num_actions]; 1];
    v[h] = vec![0.0];
    for k in (0..h).rev() {
        let (qk, vk): (Vec<Vec<f64>>, Vec<f64>) = (0..mdp.stage_sizes[k])
            .map(|s| {
                let qs: Vec<f64> = (0..mdp.num_actions)
                    .map(|a| {
                        mdp.reward_means[k][s][a] + next_value(&mdp.transitions[k][s][a], &v[k + 1])
                    })
                    .collect();
                let vs: f64 = qs
                    .iter()
                    .zip(&policy.action_probs[k][s])
                    .map(|(q, p)| q * p)
                    .sum();
                (qs, vs)
            })
            .unzip();
        q[k] = qk;
        v[k] = vk;
    }
    Ok(ValueTables { q, v })
}

/// Deterministic optimal policy by backward induction, ties to the lowest action.
pub fn optimal_policy(mdp: &StagedMdp) -> Result<(Policy, ValueTables)> {
    mdp.validate()?;
    let h = mdp.horizon;
    let mut q = vec![Vec::new(); h + 1];
    let mut v = vec![Vec::new(); h + 1];
    let mut actions = vec![Vec::new(); h + 1];
    q[h] = vec![vec![0.0; mdp.num_actions]];
    v[h] = vec![0.0];
    actions[h] = vec![0];
    for k in (0..h).rev() {
        for s in 0..mdp.stage_sizes[k] {
            let qs: Vec<f64> = (0..mdp.num_actions)
                .map(|a| {
                    mdp.reward_means[k][s][a] + next_value(&mdp.transitions[k][s][a], &v[k + 1])
                })
                .collect();
            let best = argmax(&qs);
            v[k].push(qs[best]);
            actions[k].push(best);
            q[k].push(qs);
        }
    }
    let policy = Policy::deterministic(mdp, &actions)?;
    Ok((policy, ValueTables { q, v }))
}

/// State-action occupancy `nu[k][s][a]` for stages `0..horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub nu: Vec<Vec<Vec<f64>>>,
}

impl OccupancyMeasure {
    pub fn stage_total(&self, stage: usize) -> f64 {
        self.nu[stage].iter().flatten().sum()
    }
}

/// State distribution of each stage `0..=horizon` under `policy` from the start state.
pub fn state_distribution(mdp: &StagedMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    policy.validate_for(mdp)?;
    let mut dist = vec![vec![1.0]];
    for k in 0..mdp.horizon {
        let mut next = vec![0.0; mdp.stage_sizes[k + 1]];
        for (s, &ps) in dist[k].iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            for a in 0..mdp.num_actions {
                let w = ps * policy.action_probs[k][s][a];
                if w == 0.0 {
                    continue;
                }
                for (sn, p) in mdp.transitions[k][s][a].iter().enumerate() {
                    next[sn] += w * p;
                }
            }
        }
        dist.push(next);
    }
    Ok(dist)
}

/// Exact forward computation of the stage marginals of `(S_k, A_k)`.
pub fn occupancy(mdp: &StagedMdp, policy: &Policy) -> Result<OccupancyMeasure> {
    let dist = state_distribution(mdp, policy)?;
    let nu = (0..mdp.horizon)
        .map(|k| {
            dist[k]
                .iter()
                .enumerate()
                .map(|(s, &ps)| policy.action_probs[k][s].iter().map(|p| ps * p).collect())
                .collect()
        })
        .collect();
    Ok(OccupancyMeasure { nu })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// One full-length episode with, optionally, the features of every action at each visited state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// `features[k][a]`; empty when collected without a feature map.
    pub features: Vec<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn feature(&self, stage: usize, action: usize) -> &[f64] {
        &self.features[stage][action]
    }

    /// Feature of the action actually taken at `stage`.
    pub fn taken_feature(&self, stage: usize) -> &[f64] {
        &self.features[stage][self.steps[stage].action]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Counter-based generator: trajectory `index` of a collection seeded by `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Rollout with an explicit generator.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &StagedMdp,
    policy: &Policy,
    features: Option<&FeatureMap>,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(mdp.horizon + 1);
    let mut feats = Vec::new();
    let mut state = 0;
    for k in 0..=mdp.horizon {
        let action = sample_index(&policy.action_probs[k][state], rng);
        let mean = mdp.reward_means[k][state][action];
        let reward = match mdp.reward_kind {
            RewardKind::DeterministicMean => mean,
            RewardKind::BernoulliMean => {
                if rng.random::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
        };
        steps.push(Step {
            state,
            action,
            reward,
        });
        if let Some(fm) = features {
            feats.push(fm.phi[k][state].clone());
        }
        if k < mdp.horizon {
            state = sample_index(&mdp.transitions[k][state][action], rng);
        }
    }
    Trajectory {
        steps,
        features: feats,
    }
}

/// Full rollout; identical seeds give identical trajectories.
pub fn sample_trajectory(
    mdp: &StagedMdp,
    policy: &Policy,
    features: Option<&FeatureMap>,
    seed: u64,
) -> Result<Trajectory> {
    policy.validate_for(mdp)?;
    if let Some(fm) = features {
        fm.check_against(mdp)?;
    }
    Ok(rollout(mdp, policy, features, &mut trajectory_rng(seed, 0)))
}

/// `n` independent trajectories; trajectory `j` draws from stream `j` of `seed`.
pub fn collect_dataset(
    mdp: &StagedMdp,
    features: &FeatureMap,
    policy: &Policy,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    use rayon::prelude::*;
    policy.validate_for(mdp)?;
    features.check_against(mdp)?;
    let trajectories = (0..n)
        .into_par_iter()
        .map(|j| {
            rollout(
                mdp,
                policy,
                Some(features),
                &mut trajectory_rng(seed, j as u64),
            )
        })
        .collect();
    Ok(Dataset { trajectories })
}
