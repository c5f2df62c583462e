use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use otta_core::engine::AdaptConfig;
use otta_core::eval::SweepGrid;
use otta_core::net::{Geometry, PretrainConfig};
use otta_core::signal::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::InputError;

/// Subject counts for generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_subjects: usize,
    pub target_subjects: usize,
    /// Events per source subject; defaults to `synth.stream_len`.
    pub source_stream_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_subjects: 40,
            target_subjects: 20,
            source_stream_len: None,
        }
    }
}

/// Width and depth; segment and token length come from the `synth` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            depth: 2,
        }
    }
}

/// Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Everything one experiment needs. The global `seed` replaces the seeds of
/// the `synth` and `pretrain` sections; adaptation seeds come from the grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub grid: SweepGrid,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| InputError::new(format!("config: {e}")).into())
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.source_data,
            &mut cfg.paths.target_data,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.report_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Copies the global seed into the sections that carry their own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            token_len: self.synth.token_len,
            n_tokens: self.synth.segment_len / self.synth.token_len.max(1),
            hidden: self.model.hidden,
            depth: self.model.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, e: otta_core::OttaError| -> anyhow::Error {
            match e {
                otta_core::OttaError::Config(msg) => InputError::new(format!("{section}.{msg}")),
                other => InputError::new(format!("{section}: {other}")),
            }
            .into()
        };
        self.synth.validate().map_err(|e| wrap("synth", e))?;
        let bad = |field: &str, why: &str| -> Result<()> {
            Err(InputError::new(format!("{field}: {why}")).into())
        };
        if self.data.source_subjects == 0 {
            return bad("data.source_subjects", "must be positive");
        }
        if self.data.target_subjects == 0 {
            return bad("data.target_subjects", "must be positive");
        }
        if self.data.source_stream_len == Some(0) {
            return bad("data.source_stream_len", "must be positive");
        }
        if self.model.hidden == 0 {
            return bad("model.hidden", "must be positive");
        }
        if self.model.depth == 0 {
            return bad("model.depth", "must be positive");
        }
        self.pretrain.validate().map_err(|e| wrap("pretrain", e))?;
        self.adapt
            .validate(self.geometry().n_tokens)
            .map_err(|e| wrap("adapt", e))?;
        self.grid.validate().map_err(|e| wrap("grid", e))?;
        Ok(())
    }

    /// SHA-256 over the experiment settings (paths excluded), hex, first 16
    /// characters.
    pub fn hash(&self) -> String {
        let mut settings = self.clone();
        settings.paths = PathsConfig::default();
        let bytes = serde_json::to_vec(&settings).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }
}
