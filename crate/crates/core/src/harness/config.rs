use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::{GammaRule, ScoreDims};
use crate::density_ratio::DEFAULT_W_MAX;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::PolicySpec;

pub const SCHEMA_VERSION: u32 = 1;

/// How the prediction region for a test prefix is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Standard CP calibrated on target-policy data (oracle baseline).
    #[serde(rename = "t_to_t")]
    TargetToTarget,
    /// Standard CP calibrated on behavioural data, ignoring the shift.
    #[serde(rename = "b_to_t")]
    BehaviouralToTarget,
    /// Weighted CP with the max-DR searched over the synthetic process.
    #[serde(rename = "macopp_synth")]
    MaCoppSynthetic,
    /// Weighted CP with the max-DR searched over the true target process.
    #[serde(rename = "macopp_true")]
    MaCoppTrue,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::TargetToTarget,
        Mode::BehaviouralToTarget,
        Mode::MaCoppSynthetic,
        Mode::MaCoppTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TargetToTarget => "t_to_t",
            Mode::BehaviouralToTarget => "b_to_t",
            Mode::MaCoppSynthetic => "macopp_synth",
            Mode::MaCoppTrue => "macopp_true",
        }
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, Mode::MaCoppSynthetic | Mode::MaCoppTrue)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 0.15, 0.2, 0.25, 0.3]
}

fn default_ego() -> Vec<usize> {
    vec![0]
}

fn default_w_max() -> f64 {
    DEFAULT_W_MAX
}

/// Everything an experiment run needs. Parsed from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Prefix length H.
    pub h: usize,
    /// Total trajectory length T.
    pub t: usize,
    /// Miscoverage rate.
    pub alpha: f64,
    pub n_prefixes: usize,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
    /// Target-process continuations per test prefix used to measure coverage.
    pub mc_continuations: usize,
    /// Continuations sampled per test prefix by the max-DR search.
    pub search_samples: usize,
    pub ridge_lambda: f64,
    #[serde(default)]
    pub gammas: GammaRule,
    #[serde(default)]
    pub score_dims: ScoreDims,
    #[serde(default = "default_ego")]
    pub ego_agents: Vec<usize>,
    #[serde(default)]
    pub learned_ego_dynamics: bool,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_grid")]
    pub eps_bias_grid: Vec<f64>,
    pub env: EnvConfig,
    pub behavioural: PolicySpec,
    /// Ego target policy. `eps_bias` is overridden per point in a sweep.
    pub target: PolicySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 2024,
            h: 9,
            t: 17,
            alpha: 0.05,
            n_prefixes: 1600,
            n_train: 800,
            n_calib: 400,
            n_test: 400,
            mc_continuations: 25,
            search_samples: 25,
            ridge_lambda: crate::predictor::DEFAULT_RIDGE_LAMBDA,
            gammas: GammaRule::InverseStep,
            score_dims: ScoreDims::PositionsAndVelocities,
            ego_agents: default_ego(),
            learned_ego_dynamics: false,
            w_max: DEFAULT_W_MAX,
            modes: default_modes(),
            eps_bias_grid: default_grid(),
            env: EnvConfig::default(),
            behavioural: PolicySpec::behavioural(),
            target: PolicySpec::biased(0.2),
        }
    }
}

impl ExperimentConfig {
    /// The full 1600-800-800 split.
    pub fn full_scale() -> Self {
        ExperimentConfig {
            n_prefixes: 3200,
            n_train: 1600,
            n_calib: 800,
            n_test: 800,
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn suffix_len(&self) -> usize {
        self.t - self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.h == 0 || self.h >= self.t {
            return Err(Error::config(format!(
                "need 0 < h < t, got h={}, t={}",
                self.h, self.t
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.n_train + self.n_calib + self.n_test != self.n_prefixes {
            return Err(Error::config(format!(
                "n_train + n_calib + n_test = {} but n_prefixes = {}",
                self.n_train + self.n_calib + self.n_test,
                self.n_prefixes
            )));
        }
        if self.n_calib == 0 || self.n_test == 0 {
            return Err(Error::config("n_calib and n_test must be positive"));
        }
        if self.mc_continuations == 0 || self.search_samples == 0 {
            return Err(Error::config(
                "mc_continuations and search_samples must be positive",
            ));
        }
        if self.ridge_lambda.is_nan() || self.ridge_lambda < 0.0 {
            return Err(Error::config("ridge_lambda must be non-negative"));
        }
        if self.w_max.is_nan() || self.w_max <= 1.0 {
            return Err(Error::config("w_max must exceed 1"));
        }
        self.env.validate()?;
        self.behavioural.validate()?;
        self.target.validate()?;
        if self.ego_agents.is_empty() || self.ego_agents.iter().any(|&e| e >= self.env.k) {
            return Err(Error::config("ego_agents must name existing agents"));
        }
        if self.env.sigma_act == 0.0 {
            log::warn!("env.sigma_act = 0: transition kernels lack full support");
        }
        for &b in &self.eps_bias_grid {
            PolicySpec {
                eps_bias: b,
                ..self.target
            }
            .validate()?;
        }
        Ok(())
    }

    /// Behavioural policy of every agent.
    pub fn behavioural_policies(&self) -> Vec<PolicySpec> {
        vec![self.behavioural; self.env.k]
    }

    /// Target policies: ego agents follow `target` with the given bias, the
    /// rest keep their behavioural policy.
    pub fn target_policies(&self, eps_bias: f64) -> Vec<PolicySpec> {
        (0..self.env.k)
            .map(|a| {
                if self.ego_agents.contains(&a) {
                    PolicySpec {
                        eps_bias,
                        ..self.target
                    }
                } else {
                    self.behavioural
                }
            })
            .collect()
    }
}
