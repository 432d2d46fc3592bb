use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{BaselinePreprocess, OversizePolicy, VitNorm};
use crate::model::Architecture;
use crate::training::{EarlyStopMetric, TrainConfig};
use crate::vit::{BackboneVariant, VariantName};

pub const CACHE_ENV: &str = "ATRIUM_PROBE_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    #[serde(default = "default_image_glob")]
    pub image_glob: String,
    #[serde(default = "default_label_glob")]
    pub label_glob: String,
    /// Directory of split manifests; a fresh seeded split is made if unset.
    #[serde(default)]
    pub split_dir: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_image_glob() -> String {
    "*_image.nii.gz".into()
}

fn default_label_glob() -> String {
    "*_label.nii.gz".into()
}

impl DataSection {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            image_glob: default_image_glob(),
            label_glob: default_label_glob(),
            split_dir: None,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    FractionSweep,
    PatientSweep,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::FractionSweep => "fraction_sweep",
            Mode::PatientSweep => "patient_sweep",
        })
    }
}

/// A sweep coordinate: a fraction, a patient count, or the whole set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    All(AllKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllKeyword {
    All,
}

impl SweepValue {
    pub const ALL: SweepValue = SweepValue::All(AllKeyword::All);

    pub fn label(&self) -> String {
        match self {
            SweepValue::Number(v) => format!("{v}"),
            SweepValue::All(_) => "all".into(),
        }
    }

    pub fn parse_label(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::ALL);
        }
        s.parse()
            .map(SweepValue::Number)
            .map_err(|_| Error::Config(format!("bad sweep value `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub methods: Vec<Architecture>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub values: Vec<SweepValue>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Epoch cap for sweep cells.
    #[serde(default = "default_fewshot_epochs")]
    pub fewshot_max_epochs: usize,
}

fn default_mode() -> Mode {
    Mode::Full
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_fewshot_epochs() -> usize {
    10
}

pub fn default_fraction_grid() -> Vec<SweepValue> {
    [0.01, 0.05, 0.1, 0.25, 0.5, 1.0]
        .into_iter()
        .map(SweepValue::Number)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_variant")]
    pub variant: VariantName,
    /// Token width of the tiny-test backbone.
    #[serde(default = "default_tiny_dim")]
    pub tiny_embed_dim: usize,
    #[serde(default = "default_tiny_depth")]
    pub tiny_depth: usize,
    #[serde(default = "default_tiny_heads")]
    pub tiny_heads: usize,
    /// Seed for a tiny-test backbone that has no cached checkpoint.
    #[serde(default)]
    pub backbone_seed: u64,
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
    #[serde(default)]
    pub vit_norm: VitNorm,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_input_size")]
    pub baseline_input_size: usize,
    #[serde(default = "default_pad_target")]
    pub baseline_pad_target: usize,
    #[serde(default)]
    pub oversize: OversizePolicy,
    #[serde(default)]
    pub pretrained_encoder: bool,
    /// Checkpoint directory; falls back to the cache environment variable.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_variant() -> VariantName {
    VariantName::Giant
}
fn default_tiny_dim() -> usize {
    64
}
fn default_tiny_depth() -> usize {
    2
}
fn default_tiny_heads() -> usize {
    4
}
fn default_head_channels() -> usize {
    128
}
fn default_base_channels() -> usize {
    64
}
fn default_input_size() -> usize {
    320
}
fn default_pad_target() -> usize {
    640
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("every model field has a default")
    }
}

impl ModelSection {
    pub fn backbone_variant(&self) -> Result<BackboneVariant> {
        match self.variant {
            VariantName::TinyTest => {
                BackboneVariant::tiny_test(self.tiny_embed_dim, self.tiny_depth, self.tiny_heads)
            }
            v => Ok(BackboneVariant::from_name(v)),
        }
    }

    pub fn baseline_preprocess(&self) -> BaselinePreprocess {
        BaselinePreprocess {
            pad_target: self.baseline_pad_target,
            target: self.baseline_input_size,
            oversize: self.oversize,
        }
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }
}

/// Optional replacements for the per-method training defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_metric: Option<EarlyStopMetric>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.early_stop_metric {
            cfg.early_stop_metric = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_metric: Option<EarlyStopMetric>,
    /// Per-method overrides, applied after the common ones.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub method: BTreeMap<Architecture, TrainOverrides>,
}

impl TrainSection {
    pub fn common(&self) -> TrainOverrides {
        TrainOverrides {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            early_stop_metric: self.early_stop_metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data paths are taken from the config file's directory.
        if let Some(dir) = path.parent() {
            if cfg.data.root.is_relative() {
                cfg.data.root = dir.join(&cfg.data.root);
            }
            if let Some(s) = cfg.data.split_dir.as_mut().filter(|s| s.is_relative()) {
                *s = dir.join(&*s);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        match e.mode {
            Mode::Full => {}
            Mode::FractionSweep | Mode::PatientSweep if e.values.is_empty() => {
                return Err(Error::Config(format!("{} needs sweep values", e.mode)));
            }
            Mode::FractionSweep => {
                for v in &e.values {
                    if let SweepValue::Number(f) = v {
                        if !(*f > 0.0 && *f <= 1.0) {
                            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
                        }
                    }
                }
            }
            Mode::PatientSweep => {
                for v in &e.values {
                    if let SweepValue::Number(k) = v {
                        if *k < 1.0 || k.fract() != 0.0 {
                            return Err(Error::Config(format!("patient count {k} must be an integer >= 1")));
                        }
                    }
                }
            }
        }
        if e.fewshot_max_epochs == 0 {
            return Err(Error::Config("fewshot_max_epochs must be >= 1".into()));
        }
        self.model.backbone_variant()?;
        Ok(())
    }

    /// Training settings for `method`: defaults, then common and
    /// per-method overrides.
    pub fn train_config(&self, method: Architecture, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::defaults(method);
        self.train.common().apply(&mut cfg);
        if let Some(o) = self.train.method.get(&method) {
            o.apply(&mut cfg);
        }
        cfg.seed = seed;
        cfg
    }
}
