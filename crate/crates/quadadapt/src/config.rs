//! Experiment configuration: one TOML document with sections for the
//! simulator, dataset generation, training, adaptation, control, and
//! output paths. Unknown keys are rejected, every run logs the fully
//! resolved configuration, and output files embed its hash.
//!
//! The provenance hash covers everything *except* the paths section, so
//! the same experiment written to two directories produces byte-identical
//! result tables.

use crate::adapt::AdaptConfig;
use crate::control::ControlConfig;
use crate::sim::{Disturbance, GeoGains, QuadParams, ReferenceKind};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {key:?}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid config: {0}")]
    Validation(String),
}

/// Physics-based input normalization limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    /// Linear velocity limit [m/s].
    pub v_max: f64,
    /// Angular velocity limit [rad/s].
    pub w_max: f64,
    /// Per-motor thrust limit [N].
    pub u_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { v_max: 5.0, w_max: 10.0, u_max: 6.25 }
    }
}

/// Simulator and tracking-scenario section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub quad: QuadParams,
    pub disturbance: Disturbance,
    /// Physics limits shared by normalization, datagen, and clamping.
    pub limits: Limits,
    /// Tracking reference for `track`.
    pub reference: ReferenceKind,
    /// Tracking run duration [s].
    pub duration: f64,
    /// Control period [s].
    pub dt: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            quad: QuadParams::default(),
            disturbance: Disturbance { payload_mass: 0.35, activation_time: 0.0 },
            limits: Limits::default(),
            reference: ReferenceKind::Lemniscate,
            duration: 30.0,
            dt: 0.01,
            substeps: 10,
        }
    }
}

/// Dataset generation section (desk scale by default).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub n_train: usize,
    pub n_val: usize,
    /// Samples per trajectory (at `sim.dt`).
    pub samples: usize,
    pub gains: GeoGains,
    /// Std of the random initial-position offset [m].
    pub initial_offset_std: f64,
    /// Overrides the global seed for data generation when set.
    pub seed: Option<u64>,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_val: 50,
            samples: 300,
            gains: GeoGains::default(),
            initial_offset_std: 0.15,
            seed: None,
        }
    }
}

/// Output locations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

impl PathsSection {
    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_file(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }
}

/// The complete experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; all randomness derives from it.
    pub seed: u64,
    pub sim: SimSection,
    pub datagen: DatagenSection,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub control: ControlConfig,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    /// Loads a TOML config file; `None` gives the built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides, re-validating through the
    /// schema so unknown keys and type errors are rejected.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        if pairs.is_empty() {
            return Ok(());
        }
        let text = self.resolved_toml();
        let mut tree: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, value) in pairs {
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .get_mut(part)
                    .ok_or_else(|| ConfigError::Override {
                        key: key.clone(),
                        msg: format!("no section {part:?}"),
                    })?;
            }
            let leaf = parts.last().unwrap();
            let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .map(|t| t["v"].clone())
                .or_else(|_| {
                    toml::from_str::<toml::Table>(&format!("v = \"{value}\""))
                        .map(|t| t["v"].clone())
                })
                .map_err(|e| ConfigError::Override { key: key.clone(), msg: e.to_string() })?;
            match node {
                toml::Value::Table(t) => {
                    t.insert(leaf.to_string(), parsed);
                }
                _ => {
                    return Err(ConfigError::Override {
                        key: key.clone(),
                        msg: "path does not name a table".into(),
                    })
                }
            }
        }
        let text = toml::to_string(&tree).map_err(|e| ConfigError::Parse(e.to_string()))?;
        *self = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        self.validate()
    }

    /// The fully resolved configuration as canonical TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Provenance hash of the configuration with the paths section
    /// normalized out.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.paths = PathsSection::default();
        let digest = Sha256::digest(hashed.resolved_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].to_string()
    }

    /// Writes the resolved config into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(&self.paths.out_dir)?;
        let path = self.paths.out_dir.join("resolved_config.toml");
        std::fs::write(&path, self.resolved_toml())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Validation(msg.into()));
        if self.sim.dt <= 0.0 || self.sim.substeps == 0 {
            return fail("sim.dt and sim.substeps must be positive");
        }
        if self.sim.quad.mass <= 0.0
            || self.sim.quad.inertia.iter().any(|&i| i <= 0.0)
            || self.sim.quad.arm <= 0.0
            || self.sim.quad.k_tau <= 0.0
        {
            return fail("quad parameters must be positive");
        }
        if self.sim.disturbance.payload_mass < 0.0 {
            return fail("payload mass must be non-negative");
        }
        if self.sim.limits.v_max <= 0.0 || self.sim.limits.w_max <= 0.0 || self.sim.limits.u_max <= 0.0 {
            return fail("limits must be positive");
        }
        if self.train.horizon < 2 {
            return fail("train.horizon must be at least 2");
        }
        if self.train.lr_start < self.train.lr_end || self.train.lr_end <= 0.0 {
            return fail("need lr_start >= lr_end > 0");
        }
        if self.train.sigma < 0.0 {
            return fail("train.sigma must be non-negative");
        }
        if self.adapt.window < 1 || self.adapt.rank < 1 {
            return fail("adapt.window and adapt.rank must be positive");
        }
        if self.adapt.mu0 <= 0.0 || self.adapt.mu_growth <= 1.0 {
            return fail("adapt.mu0 must be positive and mu_growth > 1");
        }
        for alphas in [&self.adapt.alphas, &self.control.alphas] {
            if alphas.is_empty() || alphas.iter().any(|&a| a <= 0.0 || a > 1.0) {
                return fail("line-search schedules need values in (0, 1]");
            }
            if alphas.windows(2).any(|p| p[1] >= p[0]) {
                return fail("line-search schedules must be strictly descending");
            }
        }
        if self.control.horizon < 1 {
            return fail("control.horizon must be at least 1");
        }
        if self.control.q_state.iter().any(|&q| q < 0.0)
            || self.control.q_control.iter().any(|&q| q < 0.0)
            || self.adapt.q_state.iter().any(|&q| q < 0.0)
            || self.adapt.q_theta < 0.0
        {
            return fail("cost weights must be non-negative");
        }
        if self.control.u_min >= self.control.u_max {
            return fail("need u_min < u_max");
        }
        Ok(())
    }

    /// Seed for a named purpose, derived from the master seed.
    pub fn derived_seed(&self, purpose: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(purpose.as_bytes());
        let out = hasher.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }
}
