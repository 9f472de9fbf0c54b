//! Spatial resampling: bilinear resizing and aligned center crops.
//!
//! Used by the coarse-to-fine training stages (quarter-size pass) and the
//! resolution-gap experiment (downscale to a coarser ground resolution, then
//! crop). Sampling uses the half-pixel-center convention, under which a
//! factor-2 downscale is exactly the mean of each 2x2 block.

use alloc::vec::Vec;

use crate::batch::ImageBatch;
use crate::CoreError;

/// Bilinear resize of every image in the batch to `(out_h, out_w)`.
pub fn resize_bilinear(
    batch: &ImageBatch,
    out_h: usize,
    out_w: usize,
) -> Result<ImageBatch, CoreError> {
    let (n, c, h, w) = batch.shape();
    if out_h == h && out_w == w {
        return Ok(batch.clone());
    }
    // Output must satisfy the container invariants up front so a bad target
    // size fails before any arithmetic.
    let probe = ImageBatch::zeros((1, 1, out_h, out_w))?;
    drop(probe);

    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for img in 0..n {
        for band in 0..c {
            let plane = batch.image(img);
            let plane = plane.band(band);
            for oy in 0..out_h {
                // Half-pixel centers: sample position in source coordinates.
                let sy = (oy as f64 + 0.5) * scale_y - 0.5;
                let y0 = libm::floor(sy);
                let ty = sy - y0;
                let y0i = (y0 as i64).clamp(0, h as i64 - 1) as usize;
                let y1i = ((y0 as i64) + 1).clamp(0, h as i64 - 1) as usize;
                for ox in 0..out_w {
                    let sx = (ox as f64 + 0.5) * scale_x - 0.5;
                    let x0 = libm::floor(sx);
                    let tx = sx - x0;
                    let x0i = (x0 as i64).clamp(0, w as i64 - 1) as usize;
                    let x1i = ((x0 as i64) + 1).clamp(0, w as i64 - 1) as usize;
                    let v00 = plane[y0i * w + x0i];
                    let v10 = plane[y0i * w + x1i];
                    let v01 = plane[y1i * w + x0i];
                    let v11 = plane[y1i * w + x1i];
                    let top = v00 + (v10 - v00) * tx;
                    let bottom = v01 + (v11 - v01) * tx;
                    data.push(top + (bottom - top) * ty);
                }
            }
        }
    }
    ImageBatch::from_vec(data, (n, c, out_h, out_w))
}

/// Center crop of every image to `(crop_h, crop_w)`. The offset is the same
/// for every image and band, so paired batches cropped with equal arguments
/// stay pixel-aligned.
pub fn center_crop(
    batch: &ImageBatch,
    crop_h: usize,
    crop_w: usize,
) -> Result<ImageBatch, CoreError> {
    let (n, c, h, w) = batch.shape();
    if crop_h > h || crop_w > w {
        return Err(CoreError::InvalidArgument("crop exceeds image extent"));
    }
    if crop_h == h && crop_w == w {
        return Ok(batch.clone());
    }
    let off_y = (h - crop_h) / 2;
    let off_x = (w - crop_w) / 2;
    let mut data = Vec::with_capacity(n * c * crop_h * crop_w);
    for img in 0..n {
        let view = batch.image(img);
        for band in 0..c {
            let plane = view.band(band);
            for y in 0..crop_h {
                let row = (off_y + y) * w + off_x;
                data.extend_from_slice(&plane[row..row + crop_w]);
            }
        }
    }
    ImageBatch::from_vec(data, (n, c, crop_h, crop_w))
}
