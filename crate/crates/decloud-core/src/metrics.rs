//! Full-reference image quality metrics: PSNR and SSIM.
//!
//! Both operate on single images (any band count). PSNR pools squared error
//! over all bands and pixels; SSIM is computed per band with a Gaussian
//! window and averaged across bands. Values depend on the declared data
//! range (`peak`), so callers state the scale explicitly instead of the
//! functions guessing it.

use alloc::vec;
use alloc::vec::Vec;

use crate::batch::ImageView;
use crate::CoreError;

/// Declared ceiling for the zero-error case, instead of +inf.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean squared error pooled over every band and pixel.
pub fn mse(a: &ImageView<'_>, b: &ImageView<'_>) -> Result<f64, CoreError> {
    a.same_shape(b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(CoreError::EmptyInput);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB: `10·log10(peak²/MSE)`, capped at
/// [`PSNR_CAP_DB`] when the images are identical.
pub fn psnr(a: &ImageView<'_>, b: &ImageView<'_>, peak: f64) -> Result<f64, CoreError> {
    if !(peak > 0.0) {
        return Err(CoreError::InvalidArgument("peak must be positive"));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(peak * peak / err)).min(PSNR_CAP_DB))
}

/// SSIM window shape and stabilization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Square window side; must be odd and no larger than the image.
    pub window: usize,
    /// Gaussian sigma for the window weights.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data (2.0 for [-1, 1], 255.0 for 8-bit scale).
    pub data_range: f64,
}

impl SsimParams {
    /// Conventional parameters (11-pixel Gaussian window, k1 = 0.01,
    /// k2 = 0.03) for a given data range.
    pub fn for_range(data_range: f64) -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range }
    }
}

/// Mean structural similarity over the valid (fully-windowed) region,
/// averaged across bands. Result lies in [-1, 1]; identical images score 1.
pub fn ssim(a: &ImageView<'_>, b: &ImageView<'_>, params: &SsimParams) -> Result<f64, CoreError> {
    a.same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if params.window % 2 == 0 || params.window == 0 {
        return Err(CoreError::InvalidArgument("SSIM window must be odd"));
    }
    if params.window > h || params.window > w {
        return Err(CoreError::InvalidArgument("image smaller than SSIM window"));
    }
    if !(params.data_range > 0.0) {
        return Err(CoreError::InvalidArgument("data range must be positive"));
    }
    let kernel = gaussian_kernel(params.window, params.sigma);
    let c1 = (params.k1 * params.data_range) * (params.k1 * params.data_range);
    let c2 = (params.k2 * params.data_range) * (params.k2 * params.data_range);

    let mut total = 0.0;
    for band in 0..a.channels() {
        let pa = a.band(band);
        let pb = b.band(band);
        let prod: Vec<f64> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
        let sq_a: Vec<f64> = pa.iter().map(|&x| x * x).collect();
        let sq_b: Vec<f64> = pb.iter().map(|&y| y * y).collect();

        let mu_a = filter_valid(pa, h, w, &kernel);
        let mu_b = filter_valid(pb, h, w, &kernel);
        let m_aa = filter_valid(&sq_a, h, w, &kernel);
        let m_bb = filter_valid(&sq_b, h, w, &kernel);
        let m_ab = filter_valid(&prod, h, w, &kernel);

        let mut band_sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = m_aa[i] - ma * ma;
            let var_b = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            band_sum += num / den;
        }
        total += band_sum / mu_a.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| libm::exp(-(i * i) as f64 / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}

/// Separable Gaussian filtering restricted to positions where the window
/// fits entirely; output is `(h − window + 1) × (w − window + 1)`.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let win = kernel.len();
    let out_w = w - win + 1;
    let out_h = h - win + 1;
    // Horizontal pass over full rows, then vertical pass over valid columns.
    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + k];
            }
            rows[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}
