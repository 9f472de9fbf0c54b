//! Image-quality metrics for paired evaluation: peak signal-to-noise ratio,
//! structural similarity, and a pluggable perceptual-distance interface.
//!
//! Conventions: PSNR pools squared error over all bands and caps the
//! zero-error case at 100 dB; SSIM uses the standard 11-tap Gaussian window
//! (σ = 1.5, k₁ = 0.01, k₂ = 0.03) and averages per-band maps; perceptual
//! distance is only ever a registered backend's score — with no backend the
//! report says "unavailable" rather than inventing a number.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use decloud_core::batch::{ImageBatch, ImageView};

/// PSNR reported for a zero-error pair instead of +∞.
pub const PSNR_CAP: f64 = 100.0;
/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian σ of the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM luminance stabilizer factor.
pub const SSIM_K1: f64 = 0.01;
/// SSIM contrast stabilizer factor.
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageView<'_>, b: &ImageView<'_>) -> Result<(), Error> {
    a.same_shape(b).map_err(|_| {
        Error::Data(format!(
            "metric inputs disagree in shape: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        ))
    })
}

/// Mean squared error pooled over every band and pixel.
pub fn mse(a: &ImageView<'_>, b: &ImageView<'_>) -> Result<f64, Error> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB against the given peak value:
/// 10·log10(peak²/MSE), capped at [`PSNR_CAP`] when the error is zero.
pub fn psnr(a: &ImageView<'_>, b: &ImageView<'_>, peak: f64) -> Result<f64, Error> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity over all fully-interior windows, averaged
/// across bands; in [−1, 1], with ssim(x, x) = 1 exactly.
pub fn ssim(a: &ImageView<'_>, b: &ImageView<'_>, peak: f64) -> Result<f64, Error> {
    check_pair(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Config(format!("ssim peak must be positive, got {peak}")));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}-pixel similarity window"
        )));
    }
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let kernel = gaussian_window();
    let mut band_total = 0.0;
    for band in 0..a.channels() {
        let xa = a.band(band);
        let xb = b.band(band);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let row = (y0 + ky) * w + x0;
                    let krow = ky * SSIM_WINDOW;
                    for kx in 0..SSIM_WINDOW {
                        let g = kernel[krow + kx];
                        let xv = xa[row + kx];
                        let yv = xb[row + kx];
                        mx += g * xv;
                        my += g * yv;
                        mxx += g * xv * xv;
                        myy += g * yv * yv;
                        mxy += g * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let vxy = mxy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
                count += 1;
            }
        }
        band_total += acc / count as f64;
    }
    Ok(band_total / a.channels() as f64)
}

/// A pluggable perceptual-distance scorer (the interface a learned metric
/// would implement; weights are supplied externally, never downloaded).
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageView<'_>, b: &ImageView<'_>) -> Result<f64, Error>;
}

/// Result of a perceptual comparison: a score, or an explicit marker that
/// no backend produced one.
#[derive(Debug, Clone, PartialEq)]
pub enum Perceptual {
    Score(f64),
    Unavailable { reason: String },
}

impl Perceptual {
    pub fn score(&self) -> Option<f64> {
        match self {
            Perceptual::Score(v) => Some(*v),
            Perceptual::Unavailable { .. } => None,
        }
    }
}

/// Score a pair through the configured backend, or report unavailability.
pub fn perceptual_distance(
    a: &ImageView<'_>,
    b: &ImageView<'_>,
    backend: Option<&dyn PerceptualBackend>,
) -> Perceptual {
    match backend {
        None => Perceptual::Unavailable { reason: "no perceptual backend configured".into() },
        Some(be) => match be.distance(a, b) {
            Ok(v) => Perceptual::Score(v),
            Err(e) => Perceptual::Unavailable {
                reason: format!("backend '{}' failed: {e}", be.name()),
            },
        },
    }
}

/// Mean absolute difference — a trivial built-in stand-in backend, mostly
/// useful to exercise the perceptual plumbing end to end.
pub struct MeanAbsBackend;

impl PerceptualBackend for MeanAbsBackend {
    fn name(&self) -> &str {
        "mean_abs"
    }
    fn distance(&self, a: &ImageView<'_>, b: &ImageView<'_>) -> Result<f64, Error> {
        check_pair(a, b)?;
        let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        Ok(sum / a.data().len() as f64)
    }
}

/// Look up a perceptual backend by its registered name.
pub fn backend_by_name(name: &str) -> Result<Box<dyn PerceptualBackend>, Error> {
    match name {
        "mean_abs" => Ok(Box::new(MeanAbsBackend)),
        other => Err(Error::Config(format!(
            "unknown perceptual backend '{other}' (available: mean_abs)"
        ))),
    }
}

/// Map the internal [−1, 1] convention onto [0, 1] for unit-peak metrics.
pub fn to_unit_scale(b: &ImageBatch) -> ImageBatch {
    let data: Vec<f64> = b.data().iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
    ImageBatch::from_vec(data, b.shape()).expect("shape unchanged")
}

/// Scores for one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

/// Per-image scores plus dataset means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Peak value the dB scale refers to.
    pub peak: f64,
    pub scores: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Present only when every image got a perceptual score.
    pub mean_lpips: Option<f64>,
}

impl MetricReport {
    /// Per-image rows plus a trailing `mean` summary row; the perceptual
    /// column is left blank when unavailable.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("id,psnr_db,ssim,lpips\n");
        for s in &self.scores {
            out.push_str(&format!("{},{},{},{}\n", s.id, s.psnr, s.ssim, cell(s.lpips)));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_psnr,
            self.mean_ssim,
            cell(self.mean_lpips)
        ));
        out
    }
}

/// Score aligned output/truth batches image by image on the given peak
/// scale. `ids` labels the rows.
pub fn evaluate_pairs(
    outputs: &ImageBatch,
    truths: &ImageBatch,
    ids: &[String],
    peak: f64,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<MetricReport, Error> {
    if outputs.shape() != truths.shape() {
        return Err(Error::Data(format!(
            "evaluation batches disagree in shape: {:?} vs {:?}",
            outputs.shape(),
            truths.shape()
        )));
    }
    if ids.len() != outputs.batch_len() {
        return Err(Error::Data(format!(
            "{} ids for {} images",
            ids.len(),
            outputs.batch_len()
        )));
    }
    if outputs.batch_len() == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let out = outputs.image(i);
        let truth = truths.image(i);
        let lpips = perceptual_distance(&out, &truth, backend).score();
        scores.push(ImageScore {
            id: id.clone(),
            psnr: psnr(&out, &truth, peak)?,
            ssim: ssim(&out, &truth, peak)?,
            lpips,
        });
    }
    let n = scores.len() as f64;
    let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
    let mean_lpips = if scores.iter().all(|s| s.lpips.is_some()) {
        Some(scores.iter().map(|s| s.lpips.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    Ok(MetricReport { peak, scores, mean_psnr, mean_ssim, mean_lpips })
}
