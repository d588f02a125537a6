//! TOML configuration file support.
//!
//! Every value in the file is optional; command-line flags take precedence
//! over file values, and built-in defaults fill whatever remains.

use std::path::Path;

use serde::Deserialize;

use balarm::{BalarmError, Result};

/// Settings readable from a `--config` file.
///
/// Keys use the notation of the model: `G` clusters, `K` autoregressive
/// lags, `H` harmonics, `P` snapshots per day, plus `seed`, `tol`,
/// `restarts`, `B` (bootstrap replicates), and `ridge`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(rename = "G")]
    pub n_clusters: Option<usize>,
    #[serde(rename = "K")]
    pub ar_order: Option<usize>,
    #[serde(rename = "H")]
    pub harmonic_order: Option<usize>,
    #[serde(rename = "P")]
    pub period: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub restarts: Option<usize>,
    #[serde(rename = "B")]
    pub n_replicates: Option<usize>,
    pub ridge: Option<f64>,
}

impl Config {
    /// Loads a configuration file, or returns defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            BalarmError::InvalidParams(format!("config file {}: {e}", path.display()))
        })
    }
}

/// Resolves an option with precedence: command-line flag, then config file,
/// then default.
pub fn resolve<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Resolves a required option that has no default.
pub fn require<T: Copy>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| BalarmError::InvalidParams(format!("{what} is required (flag or config)")))
}
