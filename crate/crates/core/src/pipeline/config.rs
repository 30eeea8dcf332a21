//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleConfig, TimeStepSet};
use crate::error::{Error, Result};
use crate::fusionnet::{FusionVariant, Stage2Config};
use crate::losses::{LossWeights, PatchGeometry};
use crate::reconstructor::{ReconArch, Stage1Config, Stage1Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub seed: u64,
    pub resolution: usize,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub fusion: FusionSection,
    pub loss: LossSection,
    pub recon: ReconArch,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root. Empty means `<out-dir>/data`.
    pub root: String,
    /// Manifest path. Empty means `<root>/manifest.tsv`.
    pub manifest: String,
    pub train_per_task: usize,
    pub test_per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub time_steps: TimeStepSet,
    pub variant: FusionVariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub grad_weight: f64,
    pub patch_size: usize,
    pub patch_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mode: Stage1Mode,
    /// Cap on training images (0 = all).
    pub max_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub steps: usize,
    pub learning_rate: f64,
    /// Cap on training pairs (0 = all).
    pub max_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Worker threads for fusion and evaluation (0 = all cores).
    /// `DMFUSE_THREADS` overrides this.
    pub threads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 64,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            fusion: FusionSection::default(),
            loss: LossSection::default(),
            recon: ReconArch::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            manifest: String::new(),
            train_per_task: 30,
            test_per_task: 10,
        }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            time_steps: TimeStepSet::default(),
            variant: FusionVariant::Full,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let p = PatchGeometry::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            grad_weight: w.grad_weight,
            patch_size: p.size,
            patch_stride: p.stride,
        }
    }
}

impl Default for Stage1Section {
    fn default() -> Self {
        let s = Stage1Config::default();
        Self {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            mode: Stage1Mode::Diffusion,
            max_images: 0,
        }
    }
}

impl Default for Stage2Section {
    fn default() -> Self {
        let s = Stage2Config::default();
        Self {
            steps: s.steps,
            learning_rate: s.learning_rate,
            max_pairs: 0,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            grad_weight: self.grad_weight,
        }
    }

    pub fn patch(&self) -> PatchGeometry {
        PatchGeometry {
            size: self.patch_size,
            stride: self.patch_stride,
        }
    }
}

impl FusionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        let schedule = self.schedule.build()?;
        self.fusion.time_steps.validate_against(&schedule)?;
        self.loss.weights().validate()?;
        if self.loss.patch_size == 0 || self.loss.patch_stride == 0 {
            return Err(Error::Config(
                "patch size and stride must be positive".into(),
            ));
        }
        if self.loss.patch_size > self.resolution {
            return Err(Error::Config("patch size exceeds the resolution".into()));
        }
        self.recon.validate()?;
        for (name, lr) in [
            ("stage1.learning_rate", self.stage1.learning_rate),
            ("stage2.learning_rate", self.stage2.learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stage1.batch_size == 0 {
            return Err(Error::Config("stage1.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical TOML serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Digest of the settings a reconstructor checkpoint must agree with
    /// (architecture, schedule, resolution).
    pub fn recon_digest(&self) -> String {
        #[derive(Serialize)]
        struct Part<'a> {
            resolution: usize,
            schedule: &'a ScheduleConfig,
            recon: &'a ReconArch,
        }
        let text = toml::to_string(&Part {
            resolution: self.resolution,
            schedule: &self.schedule,
            recon: &self.recon,
        })
        .expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            steps: self.stage1.steps,
            batch_size: self.stage1.batch_size,
            learning_rate: self.stage1.learning_rate,
            seed: self.seed,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            steps: self.stage2.steps,
            learning_rate: self.stage2.learning_rate,
            seed: self.seed,
        }
    }

    pub fn data_root(&self, out_dir: &Path) -> PathBuf {
        if self.data.root.is_empty() {
            out_dir.join("data")
        } else {
            PathBuf::from(&self.data.root)
        }
    }

    pub fn manifest_path(&self, out_dir: &Path) -> PathBuf {
        if self.data.manifest.is_empty() {
            self.data_root(out_dir).join("manifest.tsv")
        } else {
            PathBuf::from(&self.data.manifest)
        }
    }
}
