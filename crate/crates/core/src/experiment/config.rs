use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Architecture, BackboneSpec, WeightInit};
use crate::bof::BofConfig;
use crate::cnn::Hyperparams;
use crate::dataset::split::{DEFAULT_FOLDS, DEFAULT_TRAIN_RATIO};
use crate::dataset::{Target, DEFAULT_INPUT_SIZE};
use crate::error::{Error, Result};
use crate::hybrid::{HeadConfig, HybridHeadKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Hybrid,
    Bof,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Cnn => "cnn",
            Family::Hybrid => "hybrid",
            Family::Bof => "bof",
        }
    }
}

/// Backbone fields shared by the cnn and hybrid families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Architecture,
    #[serde(default)]
    pub weights: WeightInit,
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn spec(&self, seed: u64) -> BackboneSpec {
        BackboneSpec { arch: self.arch, weight_init: self.weights, seed, weights_dir: self.weights_dir.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Cnn {
        #[serde(flatten)]
        backbone: BackboneConfig,
        #[serde(default)]
        hyperparams: Hyperparams,
        /// Write each fold's selected weights into the run directory.
        #[serde(default = "yes")]
        save_checkpoints: bool,
    },
    Hybrid {
        #[serde(flatten)]
        backbone: BackboneConfig,
        head: HybridHeadKind,
        #[serde(default)]
        head_config: HeadConfig,
        /// Images per feature-extraction batch.
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
    Bof {
        #[serde(default)]
        bof: BofConfig,
    },
}

fn yes() -> bool {
    true
}

fn default_batch() -> usize {
    16
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Cnn { .. } => Family::Cnn,
            ModelConfig::Hybrid { .. } => Family::Hybrid,
            ModelConfig::Bof { .. } => Family::Bof,
        }
    }

    /// Default model name, e.g. `resnet18`, `resnet18_w0`, `resnet18_knn`, `bag_of_features`.
    pub fn default_name(&self) -> String {
        match self {
            ModelConfig::Cnn { backbone, .. } => backbone.spec(0).label(),
            ModelConfig::Hybrid { backbone, head, .. } => format!("{}_{}", backbone.spec(0).label(), head.as_str()),
            ModelConfig::Bof { .. } => "bag_of_features".to_string(),
        }
    }
}

fn default_seed() -> u64 {
    0
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_size() -> u32 {
    DEFAULT_INPUT_SIZE
}

fn default_ratio() -> f64 {
    DEFAULT_TRAIN_RATIO
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Overrides the model name used in the results layout.
    #[serde(default)]
    pub name: Option<String>,
    pub manifest: PathBuf,
    pub target: Target,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_size")]
    pub image_size: u32,
    #[serde(default = "default_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub model: ModelConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.seed.is_none() && self.output_dir.is_none()
    }
}

/// A parsed config together with the exact text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub settings: ExperimentSettings,
    pub source: String,
    pub overrides: Overrides,
}

fn config_error(err: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = err.path().to_string();
    let message = err.inner().message().to_string();
    let field = match message.split('`').nth(1).filter(|_| message.starts_with("missing field")) {
        Some(name) if path == "." => name.to_string(),
        Some(name) => format!("{path}.{name}"),
        None => path,
    };
    Error::config(field, message)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let settings: ExperimentSettings = serde_path_to_error::deserialize(de).map_err(config_error)?;
        let config = ExperimentConfig { settings, source: text.to_string(), overrides: Overrides::default() };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn with_overrides(mut self, overrides: Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            self.settings.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.settings.output_dir = dir.clone();
        }
        self.overrides = overrides;
        self
    }

    fn validate(&self) -> Result<()> {
        let s = &self.settings;
        if !(s.train_ratio > 0.0 && s.train_ratio < 1.0) {
            return Err(Error::config("train_ratio", "must lie strictly between 0 and 1"));
        }
        if s.folds < 2 {
            return Err(Error::config("folds", "need at least 2 folds"));
        }
        if s.image_size < 32 {
            return Err(Error::config("image_size", "must be at least 32 pixels"));
        }
        if let Some(name) = &s.name {
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(Error::config("name", "must be a plain directory name"));
            }
        }
        match &s.model {
            ModelConfig::Cnn { hyperparams, .. } => {
                hyperparams.validate().map_err(|e| Error::config("model.hyperparams", e.to_string()))?
            }
            ModelConfig::Hybrid { batch_size, head_config, .. } => {
                if *batch_size == 0 {
                    return Err(Error::config("model.batch_size", "must be at least 1"));
                }
                if head_config.knn_k == 0 {
                    return Err(Error::config("model.head_config.knn_k", "must be at least 1"));
                }
            }
            ModelConfig::Bof { bof } => {
                if bof.vocabulary_size < 2 {
                    return Err(Error::config("model.bof.vocabulary_size", "must be at least 2"));
                }
            }
        }
        Ok(())
    }

    pub fn model_name(&self) -> String {
        self.settings.name.clone().unwrap_or_else(|| self.settings.model.default_name())
    }

    /// SHA-256 of the config text and any overrides, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.as_bytes());
        if !self.overrides.is_empty() {
            h.update(serde_json::to_string(&self.overrides).unwrap_or_default().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HYBRID: &str = r#"
manifest = "data/manifest.csv"
target = "particle_size"
seed = 7

[model]
family = "hybrid"
arch = "resnet18"
head = "knn"

[model.head_config]
knn_k = 3
"#;

    #[test]
    fn parses_hybrid_config() {
        let c = ExperimentConfig::parse(HYBRID).unwrap();
        assert_eq!(c.settings.target, Target::ParticleSize);
        assert_eq!(c.settings.folds, 5);
        assert_eq!(c.model_name(), "resnet18_knn");
        match &c.settings.model {
            ModelConfig::Hybrid { head, head_config, batch_size, backbone } => {
                assert_eq!(*head, HybridHeadKind::Knn);
                assert_eq!(head_config.knn_k, 3);
                assert_eq!(*batch_size, 16);
                assert_eq!(backbone.weights, WeightInit::Pretrained);
            }
            other => panic!("wrong family {other:?}"),
        }
    }

    #[test]
    fn missing_target_names_field() {
        let text = HYBRID.replace("target = \"particle_size\"\n", "");
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "target"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_values_name_their_path() {
        let text = HYBRID.replace("seed = 7", "seed = \"seven\"");
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "seed"),
            e => panic!("unexpected {e}"),
        }
        let text = HYBRID.replace("target = \"particle_size\"", "target = \"colour\"");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { .. })));
        let text = HYBRID.replace("seed = 7", "folds = 1");
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "folds"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cnn_and_bof_families() {
        let cnn = r#"
manifest = "m.csv"
target = "plasticity"
[model]
family = "cnn"
arch = "resnet18"
weights = "random"
[model.hyperparams]
max_epochs = 3
patience = 1
"#;
        let c = ExperimentConfig::parse(cnn).unwrap();
        assert_eq!(c.model_name(), "resnet18_w0");
        assert_eq!(c.settings.model.family(), Family::Cnn);
        let bof = "manifest = \"m.csv\"\ntarget = \"plasticity\"\n[model]\nfamily = \"bof\"\n[model.bof]\nvocabulary_size = 40\n";
        let c = ExperimentConfig::parse(bof).unwrap();
        assert_eq!(c.model_name(), "bag_of_features");
        match c.settings.model {
            ModelConfig::Bof { bof } => assert_eq!(bof.vocabulary_size, 40),
            _ => unreachable!(),
        }
    }

    #[test]
    fn overrides_change_hash_not_source() {
        let c = ExperimentConfig::parse(HYBRID).unwrap();
        let h = c.hash();
        let o = c.clone().with_overrides(Overrides { seed: Some(9), output_dir: None });
        assert_eq!(o.source, HYBRID);
        assert_eq!(o.settings.seed, 9);
        assert_ne!(o.hash(), h);
        assert_eq!(c.clone().with_overrides(Overrides::default()).hash(), h);
    }
}
