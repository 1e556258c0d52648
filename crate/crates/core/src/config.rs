//! Controller configuration: MPC settings, learning settings and the default
//! actuator prior. Every field has a default, so a config file only needs the
//! keys it changes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::{ChannelModels, LearnerConfig, LearningFlags, OutlierConfig, PerChannel};
use crate::mpc::MpcConfig;
use crate::wblr::{NigPosterior, PredictiveDensity, WblrError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prior(#[from] WblrError),
}

/// First-order lag prior `w₀ = [1/τ, −1/τ]`, `V₀ = v0·I`, `b₀ = a₀σ₀²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub tau: f64,
    pub v0: f64,
    pub a0: f64,
    pub sigma2_v: f64,
    pub sigma2_omega: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v0: 1.0,
            a0: 2.0,
            sigma2_v: 0.25,
            sigma2_omega: 0.25,
        }
    }
}

impl PriorConfig {
    pub fn models(&self) -> Result<ChannelModels, WblrError> {
        Ok(PerChannel::new(
            NigPosterior::first_order_lag(self.tau, self.v0, self.a0, self.sigma2_v)?,
            NigPosterior::first_order_lag(self.tau, self.v0, self.a0, self.sigma2_omega)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub n0: f64,
    pub recent_samples: usize,
    pub outlier: OutlierConfig,
    pub density: PredictiveDensity,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            n0: 100.0,
            recent_samples: 30,
            outlier: OutlierConfig::default(),
            density: PredictiveDensity::StudentT,
        }
    }
}

impl LearningConfig {
    pub fn learner(&self, flags: LearningFlags) -> LearnerConfig {
        LearnerConfig {
            n0: self.n0,
            recent_samples: self.recent_samples,
            outlier: self.outlier,
            density: self.density,
            flags,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub mpc: MpcConfig,
    pub learning: LearningConfig,
    pub prior: PriorConfig,
}

impl ControllerConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mpc
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let l = &self.learning;
        if !(l.n0 > 0.0 && l.n0.is_finite()) {
            return Err(ConfigError::Invalid(format!("n0 must be positive, got {}", l.n0)));
        }
        if l.recent_samples == 0 {
            return Err(ConfigError::Invalid("recent_samples must be at least 1".into()));
        }
        let o = &l.outlier;
        if !(o.z_threshold > 0.0 && o.alpha > 0.0 && o.alpha < 1.0) {
            return Err(ConfigError::Invalid("outlier z_threshold and alpha out of range".into()));
        }
        if let Some(p) = o.exceedance_prob {
            if !(p > 0.0 && p < 1.0) {
                return Err(ConfigError::Invalid(format!("exceedance_prob must lie in (0, 1), got {p}")));
            }
        }
        self.prior.models()?;
        Ok(())
    }
}
