//! Run configuration loaded from TOML; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocol::ProtocolSpec;
use super::synthetic::SyntheticSpec;
use super::transforms::TransformKind;
use crate::error::{CdlfError, Result};
use crate::model::ModelConfig;
use crate::oracle::{Coupling, OracleParams};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub panel: Option<PathBuf>,
    pub transform: TransformKind,
    /// Split series into gap-free episodes of at least this length; 0 disables.
    pub min_episode_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleRunConfig {
    pub params: OracleParams,
    pub horizon: usize,
    pub rollouts: usize,
    pub e0: f64,
    /// Time and size of an optional unit pulse; `pulse_t = 0` disables it.
    pub pulse_t: usize,
    pub pulse_magnitude: f64,
    pub coupling: Coupling,
    pub kappas: Vec<f64>,
}

impl Default for OracleRunConfig {
    fn default() -> Self {
        Self {
            params: OracleParams::default(),
            horizon: 60,
            rollouts: 10_000,
            e0: 0.0,
            pulse_t: 0,
            pulse_magnitude: 1.0,
            coupling: Coupling::Common,
            kappas: vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.99],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityRunConfig {
    /// Output-sensitivity constant; ignored when `estimate_lp` is set.
    pub lp: f64,
    pub estimate_lp: bool,
    pub lp_probes: usize,
    pub lp_samples: usize,
    pub series: usize,
    pub rollouts: usize,
    pub gate_widening: f64,
}

impl Default for StabilityRunConfig {
    fn default() -> Self {
        Self {
            lp: 1.0,
            estimate_lp: false,
            lp_probes: 8,
            lp_samples: 256,
            series: 8,
            rollouts: 4,
            gate_widening: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSpec,
    pub stability: StabilityRunConfig,
    pub oracle: OracleRunConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| CdlfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CdlfError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        let o = &self.oracle;
        if o.horizon == 0 || o.rollouts == 0 {
            return Err(CdlfError::Config("oracle horizon and rollouts must be positive".into()));
        }
        if !(self.stability.lp >= 0.0) || !(0.0..1.0).contains(&self.stability.gate_widening) {
            return Err(CdlfError::Config("invalid stability settings".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[model]\nk_refs = 3\n[protocol]\nmode = \"post_launch\"\nt0 = 6\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.k_refs, 3);
        assert_eq!(cfg.model.window, 8);
        assert_eq!(cfg.protocol.t0, 6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("sede = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nwindw = 8\n").is_err());
        assert!(RunConfig::from_toml_str("[oracle.params]\nrh = 0.5\n").is_err());
    }

    #[test]
    fn ranges_checked() {
        assert!(RunConfig::from_toml_str("[model]\nembed_dim = 7\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\ntarget_kappa = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[protocol]\ntest_fraction = 1.0\n").is_err());
    }
}
