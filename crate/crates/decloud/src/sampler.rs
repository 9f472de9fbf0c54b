//! The fused denoising loop: start from pure noise, and per step predict
//! noise, recover the diffusion branch's clean estimate, blend it pixel-wise
//! with the reference model's prediction under the learned weights, then
//! advance by an ancestral or accelerated deterministic transition.
//!
//! The reference prediction is computed once per call and reused at every
//! step. All randomness comes from one seeded stream (initial noise first,
//! then one draw per ancestral step), so a fixed seed reproduces a run
//! bitwise. [`vanilla_sample`] runs the same loop without the reference
//! branch, both as an ablation and as the equality oracle for
//! `fusion_enabled = false`.

use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::DenoiserBundle;
use crate::error::Error;
use crate::reference::predict_reference;
use crate::tensor::{from_tensor, normal_batch, to_tensor};
use decloud_core::fusion::{clamp_weight, fuse, WeightMap};
use decloud_core::schedule::{
    ddim_step, ddim_timesteps, posterior_step, predict_x0, NoiseCoeff, Schedule,
};
use decloud_core::ImageBatch;

/// How the reverse chain advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Stochastic posterior transition at every step t → t−1.
    Ancestral,
    /// Deterministic accelerated jumps over a strided subset of steps.
    Ddim,
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleMode::Ancestral => write!(f, "ancestral"),
            SampleMode::Ddim => write!(f, "ddim"),
        }
    }
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    /// Number of strided steps in accelerated mode (ignored by ancestral).
    pub ddim_steps: usize,
    /// Inference-time weight floor; applied weights land in [eta, 1].
    pub eta: f64,
    /// `false` skips the reference branch entirely (pure diffusion).
    pub fusion_enabled: bool,
    /// Seed of the noise stream.
    pub seed: u64,
    /// Clip the clean-image estimates to [−1, 1] before stepping.
    pub clip_x0: bool,
    /// Capture clean-estimate snapshots and per-step timing detail.
    pub record_trajectory: bool,
    /// Steps t at which to snapshot the fused estimate (needs
    /// `record_trajectory`).
    pub snapshot_steps: Vec<usize>,
    /// Debug hook: replace the weighting network's output with a constant.
    /// Ignored when fusion is disabled.
    pub weight_override: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SampleMode::Ddim,
            ddim_steps: 50,
            eta: 0.3,
            fusion_enabled: true,
            seed: 0,
            clip_x0: true,
            record_trajectory: false,
            snapshot_steps: Vec::new(),
            weight_override: None,
        }
    }
}

impl SamplerConfig {
    /// Check the settings against the chain length `t_max`.
    pub fn validate(&self, t_max: usize) -> Result<(), Error> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        if self.mode == SampleMode::Ddim && !(1..=t_max).contains(&self.ddim_steps) {
            return Err(Error::Config(format!(
                "ddim_steps must lie in 1..={t_max}, got {}",
                self.ddim_steps
            )));
        }
        if let Some(v) = self.weight_override {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "weight_override must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// What one sampling run did, step by step. `mean_w` is the mean of the raw
/// weights the weighting network produced (the constant under an override,
/// 0 with fusion disabled) before the η floor.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Executed steps t, in execution order.
    pub steps: Vec<usize>,
    pub mean_w: Vec<f64>,
    pub wall_ms: Vec<f64>,
    /// (t, fused clean estimate) pairs, only with `record_trajectory`.
    #[serde(skip)]
    pub snapshots: Vec<(usize, ImageBatch)>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One row per executed step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_w,wall_ms\n");
        for i in 0..self.steps.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.steps[i], self.mean_w[i], self.wall_ms[i]
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String, Error> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("trajectory serialization failed: {e}")))
    }

    pub fn from_json(body: &str) -> Result<Self, Error> {
        serde_json::from_str(body).map_err(|e| Error::Data(format!("malformed trajectory: {e}")))
    }
}

/// Descending (t, t_prev) transition pairs for the chosen mode.
fn plan_steps(cfg: &SamplerConfig, t_max: usize) -> Result<Vec<(usize, usize)>, Error> {
    match cfg.mode {
        SampleMode::Ancestral => Ok((1..=t_max).rev().map(|t| (t, t - 1)).collect()),
        SampleMode::Ddim => {
            let taus = ddim_timesteps(t_max, cfg.ddim_steps)?;
            Ok(taus
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, taus.get(i + 1).copied().unwrap_or(0)))
                .collect())
        }
    }
}

/// Noise consistent with a clean estimate: ε = (x_t − √ᾱ_t·x₀)/√(1 − ᾱ_t).
/// Re-deriving it after fusion keeps the accelerated jump consistent with
/// the blended estimate instead of the raw network output.
fn eps_from_x0(
    xt: &ImageBatch,
    x0: &ImageBatch,
    t: usize,
    s: &Schedule,
) -> Result<ImageBatch, Error> {
    let ab = s.alpha_bar(t);
    let root = ab.sqrt();
    let denom = (1.0 - ab).sqrt();
    let (n, c, h, w) = xt.shape();
    let data = xt
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&x, &z)| (x - root * z) / denom)
        .collect();
    ImageBatch::from_vec(data, (n, c, h, w)).map_err(Error::from)
}

/// Noise prediction ε̂(x_t, t, y) as an `ImageBatch`, detached.
fn predict_eps(
    bundle: &DenoiserBundle,
    xt_t: &Tensor,
    y_t: &Tensor,
    t: usize,
) -> Result<ImageBatch, Error> {
    let n = xt_t.dims()[0];
    let inp = Tensor::cat(&[xt_t, y_t], 1)?;
    let out = bundle.cnp.forward(&inp, &vec![t; n], false)?;
    from_tensor(&out.detach())
}

/// Raw blend weights W(x_t, y, x_{0,E}, t) as a `WeightMap`, detached.
fn predict_weights(
    bundle: &DenoiserBundle,
    xt_t: &Tensor,
    y_t: &Tensor,
    x0e_t: &Tensor,
    t: usize,
) -> Result<WeightMap, Error> {
    let n = xt_t.dims()[0];
    let inp = Tensor::cat(&[xt_t, y_t, x0e_t], 1)?;
    let out = bundle.wa.forward(&inp, &vec![t; n], false)?;
    Ok(WeightMap::new(from_tensor(&out.detach())?)?)
}

struct StepDetail {
    next: ImageBatch,
    x0t: ImageBatch,
    mean_w: f64,
}

/// One transition x_t → x_{t_prev}, with the cloudy conditioning and the
/// reference prediction already on the device.
fn step_detail(
    bundle: &DenoiserBundle,
    xt: &ImageBatch,
    y_t: &Tensor,
    x0_e: &ImageBatch,
    x0e_t: &Tensor,
    t: usize,
    t_prev: usize,
    z: &ImageBatch,
    cfg: &SamplerConfig,
) -> Result<StepDetail, Error> {
    if cfg.mode == SampleMode::Ancestral && t_prev + 1 != t {
        return Err(Error::Config(format!(
            "ancestral stepping is adjacent: got t = {t}, t_prev = {t_prev}"
        )));
    }
    let xt_t = to_tensor(xt, &bundle.device)?;
    let eps_hat = predict_eps(bundle, &xt_t, y_t, t)?;
    let mut x0 = predict_x0(xt, &eps_hat, t, &bundle.schedule)?;
    if cfg.clip_x0 {
        x0 = x0.clip(-1.0, 1.0);
    }
    let mean_w;
    if cfg.fusion_enabled {
        let raw = match cfg.weight_override {
            Some(v) => WeightMap::new(ImageBatch::full(xt.shape(), v)?)?,
            None => predict_weights(bundle, &xt_t, y_t, x0e_t, t)?,
        };
        mean_w = raw.mean();
        let w = clamp_weight(&raw, cfg.eta)?;
        x0 = fuse(&x0, x0_e, &w)?;
        if cfg.clip_x0 {
            x0 = x0.clip(-1.0, 1.0);
        }
    } else {
        mean_w = 0.0;
    }
    let next = match cfg.mode {
        SampleMode::Ancestral => {
            posterior_step(&x0, xt, t, z, &bundle.schedule, NoiseCoeff::SqrtBetaTilde)?
        }
        SampleMode::Ddim => {
            let eps = eps_from_x0(xt, &x0, t, &bundle.schedule)?;
            ddim_step(&x0, &eps, t, t_prev, &bundle.schedule)?
        }
    };
    Ok(StepDetail { next, x0t: x0, mean_w })
}

/// One fused transition x_t → x_{t_prev}. `z` feeds the ancestral noise term
/// and is ignored in accelerated mode (and scaled by zero at t = 1).
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    bundle: &DenoiserBundle,
    xt: &ImageBatch,
    y: &ImageBatch,
    x0_e: &ImageBatch,
    t: usize,
    t_prev: usize,
    z: &ImageBatch,
    cfg: &SamplerConfig,
) -> Result<ImageBatch, Error> {
    let y_t = to_tensor(y, &bundle.device)?;
    let x0e_t = to_tensor(x0_e, &bundle.device)?;
    Ok(step_detail(bundle, xt, &y_t, x0_e, &x0e_t, t, t_prev, z, cfg)?.next)
}

fn check_input(bundle: &DenoiserBundle, y: &ImageBatch) -> Result<(), Error> {
    if y.channels() != bundle.bands() {
        return Err(Error::Data(format!(
            "input has {} bands but the bundle expects {}",
            y.channels(),
            bundle.bands()
        )));
    }
    let div = bundle.cnp.spec().size_divisor().max(bundle.wa.spec().size_divisor());
    if y.height() % div != 0 || y.width() % div != 0 {
        return Err(Error::Data(format!(
            "input sides {}x{} must be divisible by {div}",
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Run the full fused denoising loop on a (possibly batched) cloudy input
/// `y`, returning the final clean estimate in [−1, 1] and the per-step
/// record. The reference prediction is computed exactly once.
pub fn sample(
    bundle: &DenoiserBundle,
    y: &ImageBatch,
    cfg: &SamplerConfig,
) -> Result<(ImageBatch, TrajectoryRecord), Error> {
    cfg.validate(bundle.schedule.t_max())?;
    check_input(bundle, y)?;
    let x0_e = predict_reference(bundle.reference.as_ref(), y, &bundle.device)?;
    let y_t = to_tensor(y, &bundle.device)?;
    let x0e_t = to_tensor(&x0_e, &bundle.device)?;
    let plan = plan_steps(cfg, bundle.schedule.t_max())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xt = normal_batch(&mut rng, y.shape())?;
    let zero = ImageBatch::zeros(y.shape())?;
    let mut record = TrajectoryRecord::default();
    for &(t, t_prev) in &plan {
        let z = match cfg.mode {
            SampleMode::Ancestral => normal_batch(&mut rng, y.shape())?,
            SampleMode::Ddim => zero.clone(),
        };
        let started = Instant::now();
        let step = step_detail(bundle, &xt, &y_t, &x0_e, &x0e_t, t, t_prev, &z, cfg)?;
        record.steps.push(t);
        record.mean_w.push(step.mean_w);
        record.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
        if cfg.record_trajectory && cfg.snapshot_steps.contains(&t) {
            record.snapshots.push((t, step.x0t.clone()));
        }
        xt = step.next;
    }
    Ok((xt.clip(-1.0, 1.0), record))
}

/// The same loop without the reference branch: pure conditional diffusion.
/// With identical settings and seed, [`sample`] with `fusion_enabled = false`
/// must match this bitwise.
pub fn vanilla_sample(
    bundle: &DenoiserBundle,
    y: &ImageBatch,
    cfg: &SamplerConfig,
) -> Result<(ImageBatch, TrajectoryRecord), Error> {
    cfg.validate(bundle.schedule.t_max())?;
    check_input(bundle, y)?;
    let y_t = to_tensor(y, &bundle.device)?;
    let plan = plan_steps(cfg, bundle.schedule.t_max())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xt = normal_batch(&mut rng, y.shape())?;
    let mut record = TrajectoryRecord::default();
    for &(t, t_prev) in &plan {
        let z = match cfg.mode {
            SampleMode::Ancestral => normal_batch(&mut rng, y.shape())?,
            SampleMode::Ddim => ImageBatch::zeros(y.shape())?,
        };
        let started = Instant::now();
        let xt_t = to_tensor(&xt, &bundle.device)?;
        let eps_hat = predict_eps(bundle, &xt_t, &y_t, t)?;
        let mut x0 = predict_x0(&xt, &eps_hat, t, &bundle.schedule)?;
        if cfg.clip_x0 {
            x0 = x0.clip(-1.0, 1.0);
        }
        xt = match cfg.mode {
            SampleMode::Ancestral => {
                posterior_step(&x0, &xt, t, &z, &bundle.schedule, NoiseCoeff::SqrtBetaTilde)?
            }
            SampleMode::Ddim => {
                let eps = eps_from_x0(&xt, &x0, t, &bundle.schedule)?;
                ddim_step(&x0, &eps, t, t_prev, &bundle.schedule)?
            }
        };
        record.steps.push(t);
        record.mean_w.push(0.0);
        record.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok((xt.clip(-1.0, 1.0), record))
}
