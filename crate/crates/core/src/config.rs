//! Run configuration: everything a training or fine-tuning run needs,
//! serialisable as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatabaseManifest, LoadOptions, Manifest};
use crate::error::{Error, Result};
use crate::models::{BackboneConfig, Family, ModelSpec};
use crate::registry::ModalityRegistry;
use crate::sampler::{DropPolicy, PatchConfig, Sampler};
use crate::training::{FinetuneMode, TrainConfig};

/// Environment variable that overrides `data_root`.
pub const DATA_ROOT_ENV: &str = "HETEROSEG_DATA_ROOT";

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "yes")]
    pub shared_encoder: bool,
    #[serde(default)]
    pub mask_absent: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::MultiUnet,
            backbone: BackboneConfig::default(),
            shared_encoder: true,
            mask_absent: false,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, registry: ModalityRegistry) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family, self.backbone.clone(), registry);
        spec.shared_encoder = self.shared_encoder;
        spec.mask_absent = self.mask_absent;
        spec
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default)]
    pub drop: DropPolicy,
    #[serde(default)]
    pub patch: PatchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    /// Checkpoint to start from.
    pub source: PathBuf,
    /// Database (from the manifests) to adapt to.
    pub target_database: String,
    pub mode: FinetuneMode,
    /// Number of target training cases; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Directory that relative manifest and image paths resolve against.
    pub data_root: PathBuf,
    /// Manifest files; relative paths resolve against `data_root`.
    pub manifests: Vec<PathBuf>,
    /// Databases to train on; all manifest databases when empty.
    #[serde(default)]
    pub databases: Vec<String>,
    /// Databases whose eval split is used for validation and the final
    /// report; the training databases when empty.
    #[serde(default)]
    pub eval_databases: Vec<String>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Request bit-reproducible execution. Every code path is deterministic,
    /// so this is recorded for provenance only.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub load: LoadOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("."),
            manifests: vec![PathBuf::from(crate::dataset::MANIFEST_FILE)],
            databases: Vec::new(),
            eval_databases: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            load: LoadOptions::default(),
            finetune: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies the data-root environment override and propagates the run
    /// seed into the training block.
    pub fn resolved(mut self, data_root_override: Option<PathBuf>) -> Self {
        if let Some(root) = data_root_override {
            self.data_root = root;
        }
        self.train.seed = self.seed;
        self
    }

    /// [`RunConfig::resolved`] with the override read from the environment.
    pub fn resolved_from_env(self) -> Self {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        self.resolved(root)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.backbone.validate()?;
        if self.manifests.is_empty() {
            return Err(Error::Config("no manifest files given".into()));
        }
        if !(0.0..=1.0).contains(&self.sampler.patch.fg_bias) {
            return Err(Error::Config("patch fg_bias must lie in [0, 1]".into()));
        }
        if let Some(shape) = self.sampler.patch.shape {
            let div = self.model.backbone.divisor();
            if shape.iter().any(|&s| s == 0 || s % div != 0) {
                return Err(Error::Config(format!(
                    "patch shape {shape:?} must be positive multiples of {div}"
                )));
            }
        }
        if let Some(ft) = &self.finetune {
            if ft.budget == Some(0) {
                return Err(Error::Config("fine-tuning budget must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn manifest_paths(&self) -> Vec<PathBuf> {
        self.manifests
            .iter()
            .map(|p| self.data_root.join(p))
            .collect()
    }

    /// Merges every manifest file into one.
    pub fn load_manifest(&self) -> Result<Manifest> {
        load_manifests(&self.manifest_paths())
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::new(
            self.seed,
            self.sampler.drop.clone(),
            self.sampler.patch.clone(),
        )
    }

    /// Writes the resolved configuration into `dir` and returns its text.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        let text = self.to_toml()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), &text)?;
        Ok(text)
    }
}

/// Loads and merges manifest files, rejecting duplicate database ids.
pub fn load_manifests(paths: &[PathBuf]) -> Result<Manifest> {
    let mut merged = Manifest::default();
    for p in paths {
        merged.databases.extend(Manifest::load(p)?.databases);
    }
    merged.validate()?;
    Ok(merged)
}

/// The databases named in `ids`, or `fallback` when `ids` is empty.
pub fn select_databases(
    manifest: &Manifest,
    ids: &[String],
    fallback: &[DatabaseManifest],
) -> Result<Vec<DatabaseManifest>> {
    if ids.is_empty() {
        Ok(fallback.to_vec())
    } else {
        manifest.select(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
data_root = "data"
manifests = ["manifest.toml"]
output_dir = "runs/x"
seed = 3

[model]
family = "maf_unet"
"#,
        )
        .unwrap()
        .resolved(None);
        assert_eq!(cfg.train.epochs, 600);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.lr(150), 1e-3);
        assert_eq!(cfg.train.lr(151), 1e-4);
        assert_eq!(cfg.train.seed, 3);
        assert!(cfg.sampler.drop.enabled);
        assert_eq!(cfg.model.family, Family::MafUnet);
        assert_eq!(
            cfg.manifest_paths(),
            vec![PathBuf::from("data/manifest.toml")]
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn data_root_override_wins() {
        let cfg = RunConfig::default().resolved(Some(PathBuf::from("/elsewhere")));
        assert_eq!(
            cfg.manifest_paths()[0],
            PathBuf::from("/elsewhere/manifest.toml")
        );
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.sampler.patch.shape = Some([30, 32, 32]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert!(matches!(
            RunConfig::from_toml("model = 3"),
            Err(Error::TomlDe(_))
        ));
    }
}
