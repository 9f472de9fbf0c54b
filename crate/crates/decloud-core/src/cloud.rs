//! Cloud masks, coverage statistics, and procedural cloud synthesis.
//!
//! Masks follow the remote-sensing convention 0 = cloudy, 1 = cloud-free.
//! Synthetic overlays blend white into a clear image through a smooth
//! multi-octave value-noise alpha field, cut at its own quantile so the mean
//! alpha tracks `coverage * thickness` by construction. Everything is
//! deterministic in the seed and platform-independent (integer-hash lattice
//! noise, no float RNG state).

use alloc::vec;
use alloc::vec::Vec;

use crate::batch::{ImageBatch, ImageView};
use crate::CoreError;

/// Binary per-pixel cloud mask: 0 = cloudy, 1 = cloud-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudMask {
    mask: Vec<u8>,
    h: usize,
    w: usize,
}

impl CloudMask {
    pub fn from_vec(mask: Vec<u8>, h: usize, w: usize) -> Result<Self, CoreError> {
        if mask.len() != h * w {
            return Err(CoreError::LengthMismatch { expected: h * w, got: mask.len() });
        }
        if !mask.iter().all(|&v| v <= 1) {
            return Err(CoreError::InvalidArgument("mask entries must be 0 or 1"));
        }
        Ok(Self { mask, h, w })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.mask
    }
}

/// Cloud coverage probability: the fraction of pixels flagged cloudy (0).
pub fn compute_ccp(mask: &CloudMask) -> Result<f64, CoreError> {
    if mask.mask.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let cloudy = mask.mask.iter().filter(|&&v| v == 0).count();
    Ok(cloudy as f64 / mask.mask.len() as f64)
}

/// Flags a pixel cloudy when its mean band luminance, mapped from the
/// normalized [-1, 1] range onto [0, 1], exceeds `threshold`; the raw flags
/// then pass through one 3x3 majority-vote smoothing step to knock out
/// speckle.
pub fn threshold_cloud_mask(image: &ImageView<'_>, threshold: f64) -> CloudMask {
    let (h, w) = (image.height(), image.width());
    let mut raw = vec![1u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lum01 = (image.luminance(y, x) + 1.0) / 2.0;
            if lum01 > threshold {
                raw[y * w + x] = 0;
            }
        }
    }
    let smoothed = majority_smooth(&raw, h, w);
    CloudMask { mask: smoothed, h, w }
}

/// 3x3 majority vote per pixel; borders use the neighbors that exist. Ties
/// (possible only on even neighborhoods at borders) keep the center value.
fn majority_smooth(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ones = 0u32;
            let mut total = 0u32;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                        total += 1;
                        ones += mask[ny as usize * w + nx as usize] as u32;
                    }
                }
            }
            let zeros = total - ones;
            out[y * w + x] = match ones.cmp(&zeros) {
                core::cmp::Ordering::Greater => 1,
                core::cmp::Ordering::Less => 0,
                core::cmp::Ordering::Equal => mask[y * w + x],
            };
        }
    }
    out
}

/// SplitMix64 — a well-mixed integer hash, used as the lattice value source.
fn hash64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, octave: u32, gx: i64, gy: i64) -> f64 {
    let key = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((octave as u64) << 32)
        .wrapping_add((gx as u64).wrapping_mul(0x85eb_ca6b))
        .wrapping_add((gy as u64).wrapping_mul(0xc2b2_ae35).rotate_left(17));
    (hash64(key) >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in [0, 1]: bilinear interpolation of hashed
/// lattice values with smoothstep easing, octave amplitudes halving and
/// lattice density doubling each octave.
pub fn value_noise_field(
    h: usize,
    w: usize,
    base_cell: usize,
    octaves: u32,
    seed: u64,
) -> Result<Vec<f64>, CoreError> {
    if h == 0 || w == 0 {
        return Err(CoreError::EmptyInput);
    }
    if base_cell == 0 || octaves == 0 {
        return Err(CoreError::InvalidArgument("base cell and octave count must be nonzero"));
    }
    let mut field = vec![0.0f64; h * w];
    let mut amplitude = 1.0;
    let mut total_amp = 0.0;
    for octave in 0..octaves {
        let cell = (base_cell >> octave).max(1) as f64;
        for y in 0..h {
            let fy = y as f64 / cell;
            let gy = fy as i64;
            let ty = smoothstep(fy - gy as f64);
            for x in 0..w {
                let fx = x as f64 / cell;
                let gx = fx as i64;
                let tx = smoothstep(fx - gx as f64);
                let v00 = lattice_value(seed, octave, gx, gy);
                let v10 = lattice_value(seed, octave, gx + 1, gy);
                let v01 = lattice_value(seed, octave, gx, gy + 1);
                let v11 = lattice_value(seed, octave, gx + 1, gy + 1);
                let top = v00 + (v10 - v00) * tx;
                let bottom = v01 + (v11 - v01) * tx;
                field[y * w + x] += amplitude * (top + (bottom - top) * ty);
            }
        }
        total_amp += amplitude;
        amplitude *= 0.5;
    }
    for v in &mut field {
        *v /= total_amp;
    }
    Ok(field)
}

/// Half-width of the soft edge between cloud and sky, in noise units.
const EDGE_SOFTNESS: f64 = 0.06;

/// Smooth alpha field whose support covers roughly `coverage` of the image at
/// opacity `thickness`: the noise field is cut at its own (1 - coverage)
/// quantile with a soft edge, then scaled by `thickness`, giving
/// mean(alpha) ≈ coverage·thickness.
pub fn cloud_alpha_field(
    h: usize,
    w: usize,
    coverage: f64,
    thickness: f64,
    seed: u64,
) -> Result<Vec<f64>, CoreError> {
    if !(0.0..=1.0).contains(&coverage) || !(0.0..=1.0).contains(&thickness) {
        return Err(CoreError::InvalidArgument("coverage and thickness must lie in [0, 1]"));
    }
    if coverage == 0.0 || thickness == 0.0 {
        return Ok(vec![0.0; h * w]);
    }
    let base_cell = (h.min(w) / 2).max(2);
    let noise = value_noise_field(h, w, base_cell, 3, seed)?;
    let mut sorted = noise.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut_index =
        (((1.0 - coverage) * sorted.len() as f64) as usize).min(sorted.len() - 1);
    let cut = sorted[cut_index];
    let alpha = noise
        .iter()
        .map(|&n| {
            let s = ((n - cut) / (2.0 * EDGE_SOFTNESS) + 0.5).clamp(0.0, 1.0);
            s * thickness
        })
        .collect();
    Ok(alpha)
}

/// Lays a procedural cloud layer over a clear image:
/// cloudy = (1 − a)⊙clear + a⊙white, with white at the normalized maximum
/// (+1). `coverage = 0` returns the clear image bit-for-bit.
pub fn synth_cloud_overlay(
    clear: &ImageView<'_>,
    coverage: f64,
    thickness: f64,
    seed: u64,
) -> Result<ImageBatch, CoreError> {
    let (c, h, w) = (clear.channels(), clear.height(), clear.width());
    if coverage == 0.0 || thickness == 0.0 {
        return Ok(clear.to_batch());
    }
    let alpha = cloud_alpha_field(h, w, coverage, thickness, seed)?;
    let mut data = Vec::with_capacity(c * h * w);
    for band in 0..c {
        let plane = clear.band(band);
        for (idx, &v) in plane.iter().enumerate() {
            let a = alpha[idx];
            data.push((1.0 - a) * v + a * 1.0);
        }
    }
    Ok(ImageBatch::from_parts(data, 1, c, h, w))
}
