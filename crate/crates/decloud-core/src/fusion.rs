//! Per-pixel blending of the diffusion estimate with a reference prediction.
//!
//! A [`WeightMap`] W shaped like the image (one weight per band and pixel)
//! drives the convex combination x = (1 − W)⊙x_diffusion + W⊙x_reference.
//! At inference the weights are floored at η so the reference prior always
//! contributes; training leaves the raw squashed weights untouched (η = 0).

use crate::batch::ImageBatch;
use crate::CoreError;

/// Per-band, per-pixel blend weights in `[0, 1]` (floored into `[eta, 1]`
/// once clamped).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    w: ImageBatch,
    eta: f64,
    clamped: bool,
}

impl WeightMap {
    /// Wraps raw network output; every entry must lie in `[0, 1]`.
    pub fn new(w: ImageBatch) -> Result<Self, CoreError> {
        if !w.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(CoreError::InvalidArgument("weights must lie in [0, 1]"));
        }
        Ok(Self { w, eta: 0.0, clamped: false })
    }

    pub fn weights(&self) -> &ImageBatch {
        &self.w
    }

    /// Floor applied by the last [`clamp_weight`] call (0 before clamping).
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    /// Mean weight over the whole map.
    pub fn mean(&self) -> f64 {
        self.w.mean()
    }
}

/// Inference-time floor: every weight below `eta` is raised to `eta`, so the
/// output is confined to `[eta, 1]`. `eta = 0` is the identity (training
/// mode). Idempotent and monotone in `w_raw`.
pub fn clamp_weight(w_raw: &WeightMap, eta: f64) -> Result<WeightMap, CoreError> {
    if !(0.0..1.0).contains(&eta) {
        return Err(CoreError::InvalidArgument("eta must lie in [0, 1)"));
    }
    let w = w_raw.w.clip(eta, 1.0);
    Ok(WeightMap { w, eta, clamped: true })
}

/// Pixel-wise convex combination of the two clean-image estimates:
/// out = (1 − W)⊙x0_eps + W⊙x0_e. The output is bounded elementwise by the
/// two inputs.
pub fn fuse(x0_eps: &ImageBatch, x0_e: &ImageBatch, w: &WeightMap) -> Result<ImageBatch, CoreError> {
    x0_eps.same_shape(x0_e)?;
    x0_eps.same_shape(w.weights())?;
    let (n, c, h, wd) = x0_eps.shape();
    let data = x0_eps
        .data()
        .iter()
        .zip(x0_e.data())
        .zip(w.weights().data())
        .map(|((&d, &e), &wv)| (1.0 - wv) * d + wv * e)
        .collect();
    Ok(ImageBatch::from_parts(data, n, c, h, wd))
}

/// How the sampler applies the reference prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Inference-time weight floor.
    pub eta: f64,
    /// `false` runs the pure-diffusion trajectory (ablation mode).
    pub enabled: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { eta: 0.3, enabled: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(CoreError::InvalidArgument("eta must lie in [0, 1)"));
        }
        Ok(())
    }
}
