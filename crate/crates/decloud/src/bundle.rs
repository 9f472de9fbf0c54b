//! The deployable unit: noise predictor + weighting network + frozen
//! reference model + the noise schedule they were trained under, with
//! directory-checkpoint persistence.
//!
//! A checkpoint directory holds `meta.json` (version, band count, stage tag,
//! seed, schedule descriptor, and all three model recipes) next to one
//! `.safetensors` file per parameterized model, so any checkpoint is
//! self-describing and loadable without the original config.

use std::path::Path;

use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::networks::{build_cnp, build_wa, deterministic_init, UNet, UNetSpec};
use crate::reference::{build_reference, ReferenceModel, ReferenceSpec};
use decloud_core::schedule::{make_schedule, Schedule, ScheduleKind};

/// Checkpoint format version.
pub const META_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const CNP_FILE: &str = "cnp.safetensors";
const WA_FILE: &str = "wa.safetensors";
const REFERENCE_FILE: &str = "reference.safetensors";

/// Serializable schedule descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    /// Only `"linear"` is defined.
    pub kind: String,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { steps: 1000, kind: "linear".into(), beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule, Error> {
        let kind = match self.kind.as_str() {
            "linear" => ScheduleKind::Linear,
            other => {
                return Err(Error::Config(format!(
                    "unknown schedule kind '{other}' (known: linear)"
                )))
            }
        };
        Ok(make_schedule(self.steps, kind, self.beta_start, self.beta_end)?)
    }
}

/// Everything needed to build a fresh bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub bands: usize,
    pub schedule: ScheduleSpec,
    pub cnp: UNetSpec,
    pub wa: UNetSpec,
    pub reference: ReferenceSpec,
}

impl BundleSpec {
    /// Desk-scale default for `bands`-channel imagery.
    pub fn tiny(bands: usize) -> Self {
        BundleSpec {
            bands,
            schedule: ScheduleSpec::default(),
            cnp: UNetSpec::cnp_tiny(bands),
            wa: UNetSpec::wa_tiny(bands),
            reference: ReferenceSpec::default(),
        }
    }

    /// Full-scale layout for `bands`-channel imagery.
    pub fn full(bands: usize) -> Self {
        BundleSpec {
            bands,
            schedule: ScheduleSpec::default(),
            cnp: UNetSpec::cnp_full(bands),
            wa: UNetSpec::wa_full(bands),
            reference: ReferenceSpec::default(),
        }
    }
}

/// Checkpoint metadata, stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub version: u32,
    /// Training stage that produced the checkpoint.
    pub stage: String,
    /// Seed the run was initialized with (provenance, not behavior).
    pub seed: u64,
    #[serde(flatten)]
    pub spec: BundleSpec,
}

/// The trained (or in-training) model trio plus schedule.
pub struct DenoiserBundle {
    pub cnp: UNet,
    pub cnp_vars: VarMap,
    pub wa: UNet,
    pub wa_vars: VarMap,
    pub reference: Box<dyn ReferenceModel>,
    pub schedule: Schedule,
    pub meta: BundleMeta,
    pub device: Device,
    pub dtype: DType,
}

impl DenoiserBundle {
    /// Build a fresh bundle with reproducible initialization.
    pub fn init(
        spec: &BundleSpec,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, Error> {
        let schedule = spec.schedule.build()?;
        let mut cnp_vars = VarMap::new();
        let cnp = build_cnp(
            spec.bands,
            &spec.cnp,
            VarBuilder::from_varmap(&cnp_vars, dtype, device),
        )?;
        deterministic_init(&mut cnp_vars, seed ^ 0x636e70)?;
        let mut wa_vars = VarMap::new();
        let wa = build_wa(
            spec.bands,
            &spec.wa,
            VarBuilder::from_varmap(&wa_vars, dtype, device),
        )?;
        deterministic_init(&mut wa_vars, seed ^ 0x7761)?;
        let reference = build_reference(&spec.reference, spec.bands, seed ^ 0x726566, dtype, device)?;
        let meta = BundleMeta {
            version: META_VERSION,
            stage: "init".into(),
            seed,
            spec: spec.clone(),
        };
        Ok(DenoiserBundle {
            cnp,
            cnp_vars,
            wa,
            wa_vars,
            reference,
            schedule,
            meta,
            device: device.clone(),
            dtype,
        })
    }

    pub fn bands(&self) -> usize {
        self.meta.spec.bands
    }

    /// Write the checkpoint directory, tagging it with `stage`.
    pub fn save(&self, dir: &Path, stage: &str) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let meta = BundleMeta { stage: stage.into(), ..self.meta.clone() };
        let meta_path = dir.join(META_FILE);
        let body = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Internal(format!("metadata serialization failed: {e}")))?;
        std::fs::write(&meta_path, body)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        self.cnp_vars.save(dir.join(CNP_FILE))?;
        self.wa_vars.save(dir.join(WA_FILE))?;
        if let Some(vars) = self.reference.vars() {
            vars.save(dir.join(REFERENCE_FILE))?;
        }
        Ok(())
    }

    /// Load a checkpoint directory.
    pub fn load(dir: &Path, device: &Device) -> Result<Self, Error> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.is_file() {
            return Err(Error::MissingPrerequisite(format!(
                "no checkpoint at {} (missing {META_FILE})",
                dir.display()
            )));
        }
        let body = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: BundleMeta = serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("malformed {}: {e}", meta_path.display())))?;
        if meta.version != META_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {META_VERSION})",
                meta.version
            )));
        }
        let dtype = DType::F32;
        let spec = &meta.spec;
        let schedule = spec.schedule.build()?;
        let mut cnp_vars = VarMap::new();
        let cnp = build_cnp(
            spec.bands,
            &spec.cnp,
            VarBuilder::from_varmap(&cnp_vars, dtype, device),
        )?;
        cnp_vars.load(dir.join(CNP_FILE))?;
        let mut wa_vars = VarMap::new();
        let wa = build_wa(
            spec.bands,
            &spec.wa,
            VarBuilder::from_varmap(&wa_vars, dtype, device),
        )?;
        wa_vars.load(dir.join(WA_FILE))?;
        let reference = build_reference(&spec.reference, spec.bands, meta.seed, dtype, device)?;
        if let Some(vars) = reference.vars() {
            let path = dir.join(REFERENCE_FILE);
            if !path.is_file() {
                return Err(Error::MissingPrerequisite(format!(
                    "checkpoint {} lacks {REFERENCE_FILE} for reference '{}'",
                    dir.display(),
                    reference.name()
                )));
            }
            // VarMap::load needs &mut; the trait hands back &VarMap, so carry
            // the mutation through a fresh handle to the same storage.
            let mut handle = vars.clone();
            handle.load(path)?;
        }
        let meta = BundleMeta { spec: spec.clone(), ..meta };
        Ok(DenoiserBundle {
            cnp,
            cnp_vars,
            wa,
            wa_vars,
            reference,
            schedule,
            meta,
            device: device.clone(),
            dtype,
        })
    }
}
