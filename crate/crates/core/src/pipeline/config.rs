//! Pipeline configuration: TOML with defaults for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffprop::{DiffusionArch, SamplerConfig};
use crate::nn::{Method, OptimizerConfig};
use crate::seedgen::Enhancer;
use crate::synthdata::{DomainShift, SceneSpec};
use crate::{Error, Result};

/// Environment variable that replaces `out_dir`.
pub const OUT_ENV: &str = "DGLE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Per-class confidence percentile below which seed pixels are dropped.
    pub percentile: f64,
    pub iterations: usize,
    pub enhancer: Enhancer,
    pub data: DataConfig,
    pub segmenter: SegmenterConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/dgle"),
            percentile: 0.6,
            iterations: 4,
            enhancer: Enhancer::default(),
            data: DataConfig::default(),
            segmenter: SegmenterConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated under `out_dir/data` on first use.
    Synthetic(SyntheticData),
    /// Folders holding `images/` and optionally `labels/`.
    Folders {
        num_classes: usize,
        /// Labeled source data; needed unless a source checkpoint is given.
        #[serde(default)]
        source: Option<PathBuf>,
        /// Unlabeled target training images (labels, if present, are only
        /// used for reporting).
        target: PathBuf,
        /// Labeled target data for evaluation.
        #[serde(default)]
        eval: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticData::default())
    }
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DataConfig::Synthetic(s) => s.num_classes,
            DataConfig::Folders { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub num_classes: usize,
    pub image_size: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub eval_count: usize,
    pub rng_seed: u64,
    /// Target-domain appearance change; `None` uses the built-in preset.
    pub shift: Option<DomainShift>,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            num_classes: 5,
            image_size: 64,
            source_count: 200,
            target_count: 200,
            eval_count: 100,
            rng_seed: 0,
            shift: None,
        }
    }
}

impl SyntheticData {
    pub fn scene(&self, split_offset: u64) -> SceneSpec {
        SceneSpec {
            num_classes: self.num_classes,
            image_size: self.image_size,
            rng_seed: self.rng_seed.wrapping_add(split_offset),
            ..SceneSpec::default()
        }
    }

    pub fn target_shift(&self) -> DomainShift {
        self.shift.clone().unwrap_or_else(|| DomainShift::target_default(self.num_classes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub width: usize,
    /// Use this source model instead of training one.
    pub source_checkpoint: Option<PathBuf>,
    pub source_optimizer: OptimizerConfig,
    pub refine_optimizer: OptimizerConfig,
    pub flips: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            width: 16,
            source_checkpoint: None,
            source_optimizer: default_source_optimizer(),
            refine_optimizer: OptimizerConfig::sgd_refine(),
            flips: true,
        }
    }
}

/// Supervised source training settings.
pub fn default_source_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        method: Method::Adam,
        lr: 1e-3,
        momentum: 0.0,
        weight_decay: 0.0,
        poly_power: 0.9,
        batch_size: 4,
        epochs: 20,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub arch: DiffusionArch,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    /// Continue from the previous iteration's diffusion model instead of a
    /// fresh one.
    pub warm_start: bool,
    /// How the current segmenter serves as the denoiser's backbone.
    pub backbone: BackboneMode,
    pub flips: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            arch: DiffusionArch::default(),
            optimizer: OptimizerConfig::adamw_diffusion(),
            sampler: SamplerConfig::default(),
            warm_start: false,
            backbone: BackboneMode::Frozen,
            flips: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// Image-only condition encoder trained from scratch.
    Off,
    /// Segmenter copy kept fixed; only the denoiser learns.
    Frozen,
    /// Segmenter copy trained along with the denoiser.
    Tuned,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path`, then apply the `DGLE_OUT` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.at(path))?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(out);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.percentile) {
            return Err(Error::Config(format!("percentile must be in [0, 1), got {}", self.percentile)));
        }
        if self.diffusion.sampler.steps == 0 {
            return Err(Error::Config("diffusion.sampler.steps must be at least 1".into()));
        }
        let k = self.data.num_classes();
        if !(2..=crate::MAX_CLASSES).contains(&k) {
            return Err(Error::Config(format!("num_classes must be in 2..={}", crate::MAX_CLASSES)));
        }
        if self.segmenter.width == 0 {
            return Err(Error::Config("segmenter.width must be positive".into()));
        }
        self.segmenter.source_optimizer.validate()?;
        self.segmenter.refine_optimizer.validate()?;
        self.diffusion.optimizer.validate()?;
        if let DataConfig::Synthetic(s) = &self.data {
            if s.source_count == 0 || s.target_count == 0 {
                return Err(Error::Config("synthetic source_count and target_count must be positive".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over every setting except `out_dir` and `iterations`; neither
    /// changes what any single iteration produces, so a run can be resumed
    /// elsewhere or extended.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("iterations");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
