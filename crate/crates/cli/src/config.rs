//! Run configuration file. Every section is optional; command-line flags
//! override file values.

use std::path::Path;

use rainmap_core::io::{LoadOptions, SCHEMA_VERSION};
use rainmap_core::sampler::SamplerConfig;
use rainmap_core::simstudy::Scenario;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub seed: u64,
    pub grid_resolution: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            seed: 1,
            grid_resolution: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig { seed: 2024 }
    }
}

/// Contents of a `rainmap.toml`.
///
/// ```toml
/// schema_version = 1
///
/// [sampler]
/// n_iterations = 2000
/// burn_in = 500
/// thin = 1
/// seed = 1
///
/// [sampler.priors]
/// psi_shape = 1.0
/// psi_rate = 1.0
/// log_lengthscale_var = 2.0
/// variance = { v = 0.5, k = 2.0, scale = 2.0 }
///
/// [ingest]
/// wet_threshold_mm = 0.1
/// n_trials = 365
/// standardize = "min-max"
///
/// [scenario]
/// kind = "nonlinear"
/// n_stations = 31
///
/// [forecast]
/// seed = 1
/// grid_resolution = 16
///
/// [study]
/// seed = 2024
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub sampler: SamplerConfig,
    pub ingest: LoadOptions,
    pub scenario: Scenario,
    pub forecast: ForecastConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            sampler: SamplerConfig::default(),
            ingest: LoadOptions::default(),
            scenario: Scenario::default(),
            forecast: ForecastConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                RunConfig::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
