//! Run manifests: one `manifest.toml` per output directory.
//!
//! Every manifest carries `format_version`, `carmort_version` and `command`,
//! then command-specific keys and a `[config]` table echoing the resolved
//! configuration. A fit manifest adds `stratum`, `seed`, `stream`,
//! `wall_time_seconds`, `converged`, `failed_parameters`, `draws` and
//! `[acceptance]` (post-burn-in rate per Metropolis block).

use std::collections::BTreeMap;
use std::path::Path;

use carmort::data::StratumKey;
use serde::{Deserialize, Serialize};

use crate::error::{write_err, CliError};

pub const FORMAT_VERSION: u32 = 1;

/// Directory name for a stratum: `45-49:female` becomes `45-49_female`.
pub fn stratum_dir(key: StratumKey) -> String {
    key.to_string().replace(':', "_")
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Invalid(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(write_err(path))
}

#[derive(Debug, Serialize)]
pub struct SimulateManifest<'a, C: Serialize> {
    pub format_version: u32,
    pub carmort_version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub files: Vec<String>,
    pub config: &'a C,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitManifest<C> {
    pub format_version: u32,
    pub carmort_version: String,
    pub command: String,
    pub stratum: String,
    pub seed: u64,
    pub stream: u64,
    pub wall_time_seconds: f64,
    pub converged: bool,
    pub failed_parameters: Vec<String>,
    pub draws: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub config: C,
}

/// The stratum label recorded in a fit manifest.
pub fn read_stratum(path: &Path) -> Result<StratumKey, CliError> {
    #[derive(Deserialize)]
    struct Partial {
        stratum: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let p: Partial = toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    p.stratum.parse().map_err(|m| CliError::Config {
        path: path.to_path_buf(),
        message: m,
    })
}
