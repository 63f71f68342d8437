//! Run configuration: a single TOML file with an explicit schema
//! version. Endpoint API keys are referenced by environment-variable
//! name only and never stored in the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::Locale;
use crate::curation::PipelineConfig;
use crate::gateway::EndpointConfig;
use crate::imaging::SsimParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("endpoint role '{0}' is required by this command but not configured")]
    MissingRole(String),
    #[error("invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub source_manifest: Option<PathBuf>,
    pub artifact_store: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsimConfig {
    #[serde(flatten)]
    pub params: SsimParams,
    /// No-edit flag threshold for the SSIM baseline.
    #[serde(default = "default_ssim_threshold")]
    pub threshold: f64,
}

fn default_ssim_threshold() -> f64 {
    0.9
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            params: SsimParams::default(),
            threshold: default_ssim_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default)]
    pub canonical: bool,
    #[serde(default)]
    pub mean_of_subtask_means: bool,
    #[serde(default = "default_model_label")]
    pub model_label: String,
}

fn default_model_label() -> String {
    "candidate".to_string()
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            canonical: false,
            mean_of_subtask_means: false,
            model_label: default_model_label(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: PathsConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub ssim: SsimConfig,
    #[serde(default = "default_locales")]
    pub locales: Vec<String>,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Endpoint configs keyed by role: generator, editor, verifier,
    /// judge, aesthetic, face_embed.
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
}

fn default_locales() -> Vec<String> {
    vec!["en".to_string()]
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(cfg.schema_version));
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.ssim
            .params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.ssim.threshold) {
            return Err(ConfigError::Invalid(
                "ssim.threshold must lie in [0,1]".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pipeline.crop_threshold) {
            return Err(ConfigError::Invalid(
                "pipeline.crop_threshold must lie in [0,1]".to_string(),
            ));
        }
        if self.pipeline.min_instructions > self.pipeline.max_instructions {
            return Err(ConfigError::Invalid(
                "pipeline.min_instructions exceeds max_instructions".to_string(),
            ));
        }
        for (role, ep) in &self.endpoints {
            ep.validate()
                .map_err(|e| ConfigError::Invalid(format!("endpoint '{role}': {e}")))?;
        }
        for locale in &self.locales {
            locale
                .parse::<Locale>()
                .map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    /// Fetch an endpoint config for a role a subcommand needs.
    pub fn require_role(&self, role: &str) -> Result<&EndpointConfig, ConfigError> {
        self.endpoints
            .get(role)
            .ok_or_else(|| ConfigError::MissingRole(role.to_string()))
    }

    pub fn locales(&self) -> Vec<Locale> {
        self.locales
            .iter()
            .map(|l| l.parse().expect("validated at load"))
            .collect()
    }
}
