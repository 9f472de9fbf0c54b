//! Noise schedule and the closed-form diffusion steps built on it.
//!
//! A [`Schedule`] holds the per-step constants of a fixed Markov noising
//! chain: β_t, α_t = 1 − β_t, the running product ᾱ_t, and the posterior
//! variance β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t)·β_t. Steps are indexed 1..=T, with
//! ᾱ_0 defined as 1 so the endpoints (t = 1 transitions, accelerated jumps to
//! t_prev = 0) need no special cases.

use alloc::vec::Vec;

use crate::batch::ImageBatch;
use crate::CoreError;

/// Shape of the β progression across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β interpolated linearly from `beta_start` to `beta_end`.
    Linear,
}

/// Standard deviation convention for the ancestral posterior step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseCoeff {
    /// Noise scaled by √β̃_t — the posterior's actual standard deviation.
    #[default]
    SqrtBetaTilde,
    /// Noise scaled by β̃_t itself (variance in place of std-dev); kept
    /// selectable for comparison runs.
    BetaTilde,
}

/// Immutable per-step constants of the noising chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl Schedule {
    /// Number of steps T.
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// β_t for t in 1..=T.
    ///
    /// # Panics
    /// Panics when `t` is outside `1..=T`, like slice indexing.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α_t = 1 − β_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t = ∏_{s≤t} α_s for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// β̃_t = (1 − ᾱ_{t−1})/(1 − ᾱ_t)·β_t for t in 1..=T; β̃_1 = 0.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<(), CoreError> {
        if t == 0 || t > self.t_max() {
            return Err(CoreError::StepOutOfRange { t, t_max: self.t_max() });
        }
        Ok(())
    }
}

/// Builds the per-step constants for a `t_max`-step chain.
pub fn make_schedule(
    t_max: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule, CoreError> {
    if t_max == 0 {
        return Err(CoreError::InvalidArgument("step count must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::InvalidArgument(
            "beta bounds must satisfy 0 < beta_start <= beta_end < 1",
        ));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut running = 1.0;
    for &a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    let beta_tilde: Vec<f64> = (0..t_max)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(Schedule { kind, beta_start, beta_end, beta, alpha, alpha_bar, beta_tilde })
}

fn lincomb(a: &ImageBatch, ca: f64, b: &ImageBatch, cb: f64) -> Result<ImageBatch, CoreError> {
    a.same_shape(b)?;
    let (n, c, h, w) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Ok(ImageBatch::from_parts(data, n, c, h, w))
}

/// Noises a clean image directly to step `t`:
/// x_t = √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε.
pub fn forward_sample(
    x0: &ImageBatch,
    t: usize,
    eps: &ImageBatch,
    s: &Schedule,
) -> Result<ImageBatch, CoreError> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    lincomb(x0, libm::sqrt(ab), eps, libm::sqrt(1.0 - ab))
}

/// Recovers the clean-image estimate from a noisy image and predicted noise:
/// x₀ ≈ (x_t − √(1 − ᾱ_t)·ε̂)/√ᾱ_t. Exact inverse of [`forward_sample`]
/// when `eps_hat` is the noise actually applied.
pub fn predict_x0(
    xt: &ImageBatch,
    eps_hat: &ImageBatch,
    t: usize,
    s: &Schedule,
) -> Result<ImageBatch, CoreError> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    let root = libm::sqrt(ab);
    lincomb(xt, 1.0 / root, eps_hat, -libm::sqrt(1.0 - ab) / root)
}

/// One ancestral reverse transition from step `t` to `t − 1`:
///
/// x_{t−1} = (√ᾱ_{t−1}·β_t)/(1 − ᾱ_t)·x_{0,t}
///         + (√α_t·(1 − ᾱ_{t−1}))/(1 − ᾱ_t)·x_t
///         + σ_t·z
///
/// where σ_t follows `coeff` (β̃_1 = 0, so the t = 1 transition adds no noise
/// under either convention). `z` should be standard normal, or zero at t = 1.
pub fn posterior_step(
    x0t: &ImageBatch,
    xt: &ImageBatch,
    t: usize,
    z: &ImageBatch,
    s: &Schedule,
    coeff: NoiseCoeff,
) -> Result<ImageBatch, CoreError> {
    s.check_step(t)?;
    x0t.same_shape(z)?;
    let ab_prev = s.alpha_bar(t - 1);
    let ab = s.alpha_bar(t);
    let c0 = libm::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
    let ct = libm::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = match coeff {
        NoiseCoeff::SqrtBetaTilde => libm::sqrt(s.beta_tilde(t)),
        NoiseCoeff::BetaTilde => s.beta_tilde(t),
    };
    let mean = lincomb(x0t, c0, xt, ct)?;
    lincomb(&mean, 1.0, z, sigma)
}

/// One deterministic accelerated jump from step `t` down to `t_prev`:
/// x_{t_prev} = √ᾱ_{t_prev}·x_{0,t} + √(1 − ᾱ_{t_prev})·ε̂.
/// `t_prev = 0` returns `x0t` exactly (ᾱ_0 = 1).
pub fn ddim_step(
    x0t: &ImageBatch,
    eps_hat: &ImageBatch,
    t: usize,
    t_prev: usize,
    s: &Schedule,
) -> Result<ImageBatch, CoreError> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(CoreError::StepOrder { t, t_prev });
    }
    let ab_prev = s.alpha_bar(t_prev);
    lincomb(x0t, libm::sqrt(ab_prev), eps_hat, libm::sqrt(1.0 - ab_prev))
}

/// Uniformly strided descending timesteps for accelerated sampling:
/// `steps` values from `t_max` down to 1, deduplicated, each to be paired
/// with its successor (or 0 for the last) as the jump target.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>, CoreError> {
    if t_max == 0 || steps == 0 {
        return Err(CoreError::InvalidArgument("step counts must be at least 1"));
    }
    if steps > t_max {
        return Err(CoreError::StepOutOfRange { t: steps, t_max });
    }
    if steps == 1 {
        return Ok(alloc::vec![t_max]);
    }
    let mut taus = Vec::with_capacity(steps);
    for k in 0..steps {
        let frac = k as f64 / (steps - 1) as f64;
        let t = libm::round(1.0 + (t_max - 1) as f64 * frac) as usize;
        if taus.last() != Some(&t) {
            taus.push(t);
        }
    }
    taus.reverse();
    Ok(taus)
}
