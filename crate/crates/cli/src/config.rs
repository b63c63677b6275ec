//! Experiment configuration: one JSON document per run, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use opinf_core::polyopinf::RegSearchSpec;
use opinf_core::training::TrainingSettings;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::ExperimentId;
use crate::family::Family;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Optional replacements for the training defaults. The seed is set at the
/// top level of the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lbfgs_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lbfgs_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lbfgs_history: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
}

impl TrainingOverrides {
    pub fn apply(&self, seed: u64) -> TrainingSettings {
        let d = TrainingSettings::default();
        TrainingSettings {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            decay: self.decay.unwrap_or(d.decay),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            lbfgs_every: self.lbfgs_every.unwrap_or(d.lbfgs_every),
            lbfgs_steps: self.lbfgs_steps.unwrap_or(d.lbfgs_steps),
            lbfgs_history: self.lbfgs_history.unwrap_or(d.lbfgs_history),
            ensemble_size: self.ensemble_size.unwrap_or(d.ensemble_size),
            seed,
        }
    }
}

/// Log-spaced regularization grid for the polynomial fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for RegGrid {
    fn default() -> Self {
        Self {
            min: 1e-8,
            max: 1e3,
            count: 40,
        }
    }
}

impl RegGrid {
    pub fn spec(&self) -> Result<RegSearchSpec, ConfigError> {
        RegSearchSpec::log_spaced(self.min, self.max, self.count).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Discretization overrides, mostly for quick runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomOverrides {
    /// Burgers cell count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Store every n-th full-order step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub k_values: Vec<usize>,
    pub families: Vec<Family>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: TrainingOverrides,
    #[serde(default)]
    pub regularization: RegGrid,
    #[serde(default)]
    pub fom: FomOverrides,
    /// Number of random test parameters (parametric experiments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_draws: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId, k_values: Vec<usize>, families: Vec<Family>) -> Self {
        Self {
            experiment,
            k_values,
            families,
            seed: 0,
            training: TrainingOverrides::default(),
            regularization: RegGrid::default(),
            fom: FomOverrides::default(),
            test_draws: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.k_values.is_empty() {
            return bad("k_values must not be empty".into());
        }
        if self.k_values.contains(&0) {
            return bad("every K must be at least 1".into());
        }
        let mut seen = Vec::new();
        for f in &self.families {
            if seen.contains(f) {
                return bad(format!("family {f} listed twice"));
            }
            if !f.available_for(self.experiment) {
                return bad(format!("family {f} is not available for {}", self.experiment));
            }
            seen.push(*f);
        }
        if self.test_draws.is_some() && !self.experiment.is_parametric() {
            return bad(format!("test_draws only applies to parametric experiments, not {}", self.experiment));
        }
        let o = &self.fom;
        if [o.cells, o.nx, o.ny, o.snapshot_stride].contains(&Some(0)) {
            return bad("fom counts must be at least 1".into());
        }
        if let Some(dt) = o.dt {
            if !(dt > 0.0) {
                return bad(format!("fom dt must be positive, got {dt}"));
            }
        }
        if self.experiment.is_burgers() && (o.nx.is_some() || o.ny.is_some()) {
            return bad("nx/ny apply to heat experiments only".into());
        }
        if !self.experiment.is_burgers() && o.cells.is_some() {
            return bad("cells applies to burgers experiments only".into());
        }
        self.regularization.spec()?;
        self.settings()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn settings(&self) -> TrainingSettings {
        self.training.apply(self.seed)
    }

    /// Canonical JSON used for hashing; the output location is excluded.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    /// First 8 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash8(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.experiment, self.hash8())
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_json(s)
    }
}
