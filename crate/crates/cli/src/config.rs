//! Flat TOML configuration. Every key is optional; command-line flags win.
//!
//! ```toml
//! seed = 13
//! out_dir = "runs/a"
//! parallelism = 8
//! model = "gpt-3.5-turbo"
//! sigma = 0.7
//! shots = 4
//! sample = 200
//! samples_per_dataset = 10000
//! temperature = 0.0
//! max_tokens = 512
//! cache_dir = "cache"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub model: Option<String>,
    pub sigma: Option<f64>,
    pub shots: Option<usize>,
    pub sample: Option<usize>,
    pub samples_per_dataset: Option<usize>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub cache_dir: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
