//! JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use lfsamba::losses::{LossConfig, Supervision};
use lfsamba::model::ModelConfig;
use lfsamba::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub loss: LossConfig,
    pub mode: Supervision,
    /// Training dataset root.
    pub dataset: Option<PathBuf>,
    /// Upper bound on optimizer steps.
    pub steps: u64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    /// Also write `step_<n>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Score the training set every this many steps; 0 disables.
    pub eval_every: u64,
    /// Stop once the training-set mean MAE is at or below this value.
    pub target_mae: Option<f64>,
    /// Stop only once the training-set mean Fβ also reaches this value.
    pub target_f_beta: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            loss: LossConfig::default(),
            mode: Supervision::Full,
            dataset: None,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            target_mae: None,
            target_f_beta: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(CliError::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.target_f_beta.is_some() && self.target_mae.is_none() {
            return Err(CliError::Config("target_f_beta needs target_mae".into()));
        }
        if (self.target_mae.is_some()) && self.eval_every == 0 {
            return Err(CliError::Config("early stopping needs eval_every > 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Numeric precision of a run, from `LFSAMBA_PRECISION`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub const PRECISION_VAR: &str = "LFSAMBA_PRECISION";

impl Precision {
    pub fn parse(value: Option<&str>) -> Result<Self> {
        match value.map(str::trim) {
            None | Some("") | Some("f64") => Ok(Precision::F64),
            Some("f32") => Ok(Precision::F32),
            Some(other) => Err(CliError::Config(format!("{PRECISION_VAR} must be f32 or f64, got {other:?}"))),
        }
    }

    pub fn from_env() -> Result<Self> {
        Self::parse(std::env::var(PRECISION_VAR).ok().as_deref())
    }
}
