//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use qpilab_core::learner::LearnerConfig;
use qpilab_core::mdp::RewardKind;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub learner: LearnerSpec,
    #[serde(default)]
    pub guesses: GuessSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub d: usize,
    pub horizon: usize,
    /// Interior stage width; ignored when `stage_sizes` is given.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_sizes: Option<Vec<usize>>,
    pub num_actions: usize,
    #[serde(default)]
    pub reward_kind: RewardKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_width() -> usize {
    4
}

impl EnvSpec {
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stage_sizes
            .clone()
            .unwrap_or_else(|| qpilab_core::envs::uniform_stage_sizes(self.horizon, self.width))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BehaviorSpec {
    #[default]
    Uniform,
    /// `mix * uniform + (1 - mix) * optimal`.
    EpsilonGreedy { mix: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n: usize,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    /// Seed of the first replicate; replicate `r` uses `seed + r`.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub lambda: f64,
    pub alpha: f64,
    /// Euclidean bound on retained parameters; the enlarged bound of the true guess when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_radius: Option<f64>,
    pub grid_per_stage: usize,
    pub combo_cap: usize,
    pub net_xi: f64,
    pub seed: u64,
    /// Fixed ellipsoid radius; calibrated per sample size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Fixed tightness threshold; calibrated per sample size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_bar: Option<f64>,
    pub calibration: CalibrationSpec,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        let base = LearnerConfig::default();
        Self {
            lambda: base.lambda,
            alpha: 0.1,
            theta_radius: None,
            grid_per_stage: base.grid_per_stage,
            combo_cap: base.combo_cap,
            net_xi: base.net_xi,
            seed: base.seed,
            beta: None,
            eps_bar: None,
            calibration: CalibrationSpec::default(),
        }
    }
}

impl LearnerSpec {
    /// Learner configuration; `default_radius` stands in for an unset `theta_radius`, and
    /// placeholders stand in for a radius and threshold that calibration will fill.
    pub fn base_config(&self, default_radius: f64) -> LearnerConfig {
        LearnerConfig {
            lambda: self.lambda,
            beta: self.beta.unwrap_or(1.0),
            eps_bar: self.eps_bar.unwrap_or(1.0),
            theta_radius: self.theta_radius.unwrap_or(default_radius),
            alpha: self.alpha,
            grid_per_stage: self.grid_per_stage,
            combo_cap: self.combo_cap,
            net_xi: self.net_xi,
            seed: self.seed,
        }
    }

    pub fn needs_calibration(&self) -> bool {
        self.beta.is_none() || self.eps_bar.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSpec {
    pub replicates: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            replicates: 50,
            delta: 0.02,
            seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuessSpec {
    /// Grid size including the true guess and the all-zero guess.
    pub count: usize,
    /// Standard deviation of the perturbations of the true guess.
    pub spread: f64,
    pub seed: u64,
    /// Policies whose fitted parameters define the true guess.
    pub policy_sample: usize,
    pub policy_seed: u64,
}

impl Default for GuessSpec {
    fn default() -> Self {
        Self {
            count: 16,
            spread: 0.3,
            seed: 7,
            policy_sample: 200,
            policy_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Sample sizes; the data section's `n` alone when empty.
    pub ns: Vec<usize>,
    pub replicates: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ns: Vec::new(),
            replicates: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Record elapsed milliseconds per replicate; off keeps result files byte-identical across runs.
    pub record_wall_time: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn sweep_ns(&self) -> Vec<usize> {
        if self.sweep.ns.is_empty() {
            vec![self.data.n]
        } else {
            self.sweep.ns.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let e = &self.env;
        if e.d == 0 || e.horizon == 0 || e.num_actions == 0 {
            return bad("env.d, env.horizon and env.num_actions must be at least 1".into());
        }
        let sizes = e.stage_sizes();
        if sizes.len() != e.horizon + 1 || sizes.contains(&0) {
            return bad(format!(
                "stage sizes {sizes:?} do not fit horizon {}",
                e.horizon
            ));
        }
        if sizes[0] != 1 || sizes[e.horizon] != 1 {
            return bad("the first and terminal stages must hold a single state".into());
        }
        if self.data.n == 0 || self.sweep_ns().contains(&0) {
            return bad("sample sizes must be at least 1".into());
        }
        if let BehaviorSpec::EpsilonGreedy { mix } = self.data.behavior {
            if !(0.0..=1.0).contains(&mix) {
                return bad(format!("behavior mix {mix} outside [0, 1]"));
            }
        }
        if self.sweep.replicates == 0 {
            return bad("sweep.replicates must be at least 1".into());
        }
        if self.guesses.count == 0
            || self.guesses.policy_sample == 0
            || !(self.guesses.spread >= 0.0)
        {
            return bad(
                "guesses.count and guesses.policy_sample must be positive, spread nonnegative"
                    .into(),
            );
        }
        let c = &self.learner.calibration;
        if self.learner.needs_calibration()
            && (c.replicates == 0 || !(c.delta > 0.0 && c.delta < 1.0))
        {
            return bad("calibration needs replicates >= 1 and delta in (0, 1)".into());
        }
        self.learner
            .base_config(1.0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[env]
d = 2
horizon = 3
num_actions = 2

[data]
n = 100
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.env.stage_sizes(), vec![1, 4, 4, 1]);
        assert_eq!(cfg.sweep_ns(), vec![100]);
        assert!(cfg.learner.needs_calibration());
        assert_eq!(cfg.data.behavior, BehaviorSpec::Uniform);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.data.behavior = BehaviorSpec::EpsilonGreedy { mix: 0.25 };
        cfg.learner.beta = Some(2.0);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("n = 100", "n = 0")).is_err());
        assert!(
            ExperimentConfig::from_toml_str(&format!("{MINIMAL}\n[sweep]\nreplicates = 0\n"))
                .is_err()
        );
        assert!(ExperimentConfig::from_toml_str(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
        let mix = MINIMAL.replace(
            "n = 100",
            "n = 100\nbehavior = { kind = \"epsilon-greedy\", mix = 1.5 }",
        );
        assert!(ExperimentConfig::from_toml_str(&mix).is_err());
    }
}
