//! Experiment configuration: one TOML file with a section per subsystem.
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::MmdConfig;
use crate::data::{load_directory, synthesize_dataset, Dataset, GeneratorConfig};
use crate::disentangle::FdConfig;
use crate::encoder::EncoderConfig;
use crate::error::{config, Result};
use crate::fusion::FusionConfig;
use crate::metrics::MetricsConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory root when `source = "directory"`.
    pub root: Option<PathBuf>,
    pub n_pairs: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl DataConfig {
    /// Build or load the dataset this section describes.
    pub fn load(&self, image_size: usize) -> Result<Dataset> {
        match self.source {
            DataSource::Synthetic => synthesize_dataset(self.n_pairs, self.seed, &self.generator),
            DataSource::Directory => {
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| config("data.root is required when data.source = \"directory\""))?;
                load_directory(root, (image_size, image_size))
            }
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            n_pairs: 100,
            seed: 1,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub alignment: MmdConfig,
    pub disentangle: FdConfig,
    pub fusion: FusionConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.alignment.validate()?;
        self.disentangle.validate()?;
        self.fusion.validate(self.encoder.grid(), self.encoder.image_size)?;
        self.trainer.validate()?;
        self.metrics.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.generator.validate()?;
            if self.data.generator.image_size != self.encoder.image_size {
                return Err(config(format!(
                    "data.generator.image_size {} differs from encoder.image_size {}",
                    self.data.generator.image_size, self.encoder.image_size
                )));
            }
        } else if self.data.root.is_none() {
            return Err(config("data.root is required when data.source = \"directory\""));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// scalars, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config(format!("override `{o}` is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut path: Vec<&str> = key.trim().split('.').collect();
            let leaf = path.pop().expect("split yields at least one part");
            let mut table = &mut root;
            for part in path {
                table = table
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| config(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 chars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Desk-scale preset: 64x64 images, patch 8, tiny widths.
    pub fn desk_scale(image_size: usize) -> Self {
        let mut cfg = Self::default();
        cfg.data.generator.image_size = image_size;
        cfg.encoder.image_size = image_size;
        cfg.encoder.patch_size = 8;
        cfg.encoder.embed_dim = 32;
        cfg.encoder.num_heads = 4;
        cfg.encoder.depth = 4;
        cfg.fusion.decoder_stages = 3;
        cfg.fusion.base_channels = 16;
        cfg.trainer.batch_size = 8;
        cfg
    }
}
