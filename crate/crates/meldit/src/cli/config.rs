//! Run configuration: one serializable tree capturing every knob a run
//! depends on, echoed into each output directory so any artifact can be
//! reproduced from the config file sitting next to it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::score::binio::{sha8, write_file};
use crate::trainer::TrainConfig;

/// File name the resolved configuration is echoed under.
pub const RUN_CONFIG_FILE: &str = "run-config.toml";

/// Which integrator walks the reverse diffusion process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Ode,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Ode => "ode",
        })
    }
}

/// Inference-time sampling settings. Guidance strength lives in
/// [`GuidanceConfig`], shared with training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sampler: SamplerKind::Ode,
            steps: 50,
            seed: 0,
        }
    }
}

/// Merged view of model, training, guidance, and sampling settings plus the
/// corpus and output locations.
///
/// Resolution order: built-in defaults, then an optional config file, then
/// command-line flags; later layers win. Every field is optional in the
/// file, so a config may state only what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    /// Corpus root holding the `train/` and `test/` split directories.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::preset("tiny").expect("tiny preset is always valid"),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            Error::Config(format!("run config {}: {e}", path.display()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config has no unserializable values")
    }

    /// Short content hash of the serialized config, for provenance records.
    pub fn hash(&self) -> String {
        hex8(&sha8(self.to_toml().as_bytes()))
    }

    /// Echoes the resolved config into `dir` as [`RUN_CONFIG_FILE`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(RUN_CONFIG_FILE), self.to_toml().as_bytes())
    }
}

/// Lowercase hex rendering of a short digest.
pub fn hex8(digest: &[u8; 8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
