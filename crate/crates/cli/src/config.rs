//! JSON configuration overlay. Keys mirror the long flag names (with `_` for
//! `-`); a flag given on the command line wins over the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use ssd_pulse::model::PhysMambaConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub hr: Option<f64>,
    pub seconds: Option<f64>,
    pub fps: Option<f64>,
    pub noise: Option<f64>,
    pub motion: Option<f64>,
    pub harmonic: Option<f64>,
    pub count: Option<usize>,
    pub size: Option<usize>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub clip: Option<PathBuf>,
    pub init_seed: Option<u64>,
    pub save_ckpt: Option<PathBuf>,
    pub pred: Option<Vec<PathBuf>>,
    pub label: Option<Vec<PathBuf>>,
    pub lengths: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub model: Option<PhysMambaConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// `flag`, else `file`, else `default`.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
