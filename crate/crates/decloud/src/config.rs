//! The experiment configuration file: one versioned TOML document that fixes
//! the schedule, both network layouts, the reference model and its training,
//! the three stage budgets, sampling, data handling, and metric options.
//!
//! One seed drives every random stream. Section-level seeds (sampler,
//! reference training, stages) are derived from it with fixed salts at load
//! time, so a file plus a seed pins the whole run; command-line flags may
//! override individual values after loading. Defaults describe the
//! desk-scale profile that trains in minutes on a CPU.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleSpec, ScheduleSpec};
use crate::data::SynthConfig;
use crate::error::Error;
use crate::networks::UNetSpec;
use crate::reference::{ReferenceSpec, ReferenceTrainConfig};
use crate::sampler::SamplerConfig;
use crate::training::{Stage, StageConfig};

/// Schema version this build reads and writes.
pub const CONFIG_VERSION: u32 = 1;

const SAMPLER_SALT: u64 = 0x736d_706c;
const REFERENCE_SALT: u64 = 0x7265_6674;
const STAGE_SALT: u64 = 0x7374_6700;

/// Budget of one training stage as written in the file (the stage identity
/// and its seed are supplied by position and the experiment seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageParams {
    pub image_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Noise-loss weight in the joint objective (read by the joint stage).
    pub lambda: f64,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            image_size: 32,
            batch_size: 8,
            learning_rate: 1e-5,
            iterations: 1000,
            lambda: 1.0,
        }
    }
}

/// The three stage budgets: reduced-size noise training, weighting training
/// against the frozen predictor, and full-size joint refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagesConfig {
    pub cnp_small: StageParams,
    pub wa_frozen: StageParams,
    pub joint: StageParams,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            cnp_small: StageParams { image_size: 16, iterations: 2000, ..Default::default() },
            wa_frozen: StageParams { iterations: 1000, ..Default::default() },
            joint: StageParams { iterations: 1000, ..Default::default() },
        }
    }
}

/// Where the dataset lives and how it is split — plus, optionally, the
/// recipe to generate it when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Train fraction of the split.
    pub train_ratio: f64,
    pub split_seed: u64,
    /// Meters per pixel assumed for bare directories without a manifest.
    pub nominal_resolution: f64,
    /// When set, `train` generates this dataset under `dir` if none exists.
    pub synth: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_ratio: 0.8,
            split_seed: 17,
            nominal_resolution: 0.5,
            synth: Some(SynthConfig::default()),
        }
    }
}

/// Metric conventions for evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Peak of the dB scale; images are mapped to [0, 1] before scoring, so
    /// 1.0 reports on the unit scale.
    pub peak: f64,
    /// Perceptual backend name, or none for PSNR/SSIM only.
    pub perceptual: Option<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { peak: 1.0, perceptual: None }
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every stream below derives from it.
    pub seed: u64,
    pub bands: usize,
    /// Checkpoints, logs, and reports land here.
    pub out_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub cnp: UNetSpec,
    pub wa: UNetSpec,
    pub reference: ReferenceSpec,
    pub reference_train: ReferenceTrainConfig,
    pub stages: StagesConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bands = 4;
        let mut cfg = ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            bands,
            out_dir: PathBuf::from("runs/exp"),
            schedule: ScheduleSpec::default(),
            cnp: UNetSpec::cnp_tiny(bands),
            wa: UNetSpec::wa_tiny(bands),
            reference: ReferenceSpec::default(),
            reference_train: ReferenceTrainConfig::default(),
            stages: StagesConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        };
        cfg.normalize();
        cfg
    }
}

impl ExperimentConfig {
    /// Derive section seeds from the experiment seed. Idempotent; called on
    /// every load so the file's derived fields can never drift from `seed`.
    pub fn normalize(&mut self) {
        self.sampler.seed = self.seed ^ SAMPLER_SALT;
        self.reference_train.seed = self.seed ^ REFERENCE_SALT;
    }

    /// Set the master seed and rederive every dependent stream.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.normalize();
    }

    /// Structural and cross-field validation.
    pub fn validate(&self) -> Result<(), Error> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (this build reads {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.bands == 0 {
            return Err(Error::Config("bands must be positive".into()));
        }
        self.cnp.validate()?;
        self.wa.validate()?;
        if self.cnp.in_channels != 2 * self.bands || self.cnp.out_channels != self.bands {
            return Err(Error::Config(format!(
                "noise predictor expects {}→{} channels for {} bands, spec says {}→{}",
                2 * self.bands,
                self.bands,
                self.bands,
                self.cnp.in_channels,
                self.cnp.out_channels
            )));
        }
        if self.wa.in_channels != 3 * self.bands || self.wa.out_channels != self.bands {
            return Err(Error::Config(format!(
                "weighting network expects {}→{} channels for {} bands, spec says {}→{}",
                3 * self.bands,
                self.bands,
                self.bands,
                self.wa.in_channels,
                self.wa.out_channels
            )));
        }
        self.schedule.build()?;
        self.sampler.validate(self.schedule.steps)?;
        let divisor = self.cnp.size_divisor().max(self.wa.size_divisor());
        for (name, p) in [
            ("cnp_small", &self.stages.cnp_small),
            ("wa_frozen", &self.stages.wa_frozen),
            ("joint", &self.stages.joint),
        ] {
            if p.image_size == 0 || p.image_size % divisor != 0 {
                return Err(Error::Config(format!(
                    "stage {name} image size {} must be a positive multiple of {divisor}",
                    p.image_size
                )));
            }
            if p.batch_size == 0 {
                return Err(Error::Config(format!("stage {name} batch size must be positive")));
            }
            if !(p.learning_rate > 0.0) {
                return Err(Error::Config(format!(
                    "stage {name} learning rate must be positive"
                )));
            }
        }
        if !(self.stages.joint.lambda > 0.0) {
            return Err(Error::Config("joint lambda must be positive".into()));
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train ratio must lie strictly between 0 and 1, got {}",
                self.data.train_ratio
            )));
        }
        if let Some(synth) = &self.data.synth {
            if synth.bands != self.bands {
                return Err(Error::Config(format!(
                    "synthetic data has {} bands but the experiment uses {}",
                    synth.bands, self.bands
                )));
            }
        }
        if !(self.metrics.peak > 0.0) {
            return Err(Error::Config("metric peak must be positive".into()));
        }
        if let Some(name) = &self.metrics.perceptual {
            crate::metrics::backend_by_name(name)?;
        }
        Ok(())
    }

    /// Assemble the model construction recipe.
    pub fn bundle_spec(&self) -> BundleSpec {
        BundleSpec {
            bands: self.bands,
            schedule: self.schedule.clone(),
            cnp: self.cnp.clone(),
            wa: self.wa.clone(),
            reference: self.reference.clone(),
        }
    }

    /// Runnable configuration of one stage, with its derived seed.
    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let (idx, p) = match stage {
            Stage::CnpSmall => (0u64, &self.stages.cnp_small),
            Stage::WaFrozen => (1, &self.stages.wa_frozen),
            Stage::Joint => (2, &self.stages.joint),
        };
        StageConfig {
            stage,
            image_size: p.image_size,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            iterations: p.iterations,
            lambda: p.lambda,
            seed: self.seed ^ (STAGE_SALT + idx),
        }
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read, normalize, and validate a config file.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&body)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }
}
