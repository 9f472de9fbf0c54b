//! Rank-4 image container shared by every numeric operation.
//!
//! Layout is `(batch, channel, height, width)`, row-major. Values use the
//! normalized `[-1, 1]` convention internally; conversion to and from storage
//! ranges happens at IO boundaries, outside this crate. Data is `f64`: the
//! clean-image recovery step divides by √ᾱ_t, which near the end of a long
//! schedule amplifies storage rounding ~150×, and the round-trip identity is
//! required to hold to 1e-5 at every step. Single precision appears only at
//! the network and file boundaries.

use alloc::vec;
use alloc::vec::Vec;

use crate::CoreError;

/// Smallest accepted spatial side.
pub const MIN_SIDE: usize = 1;
/// Largest accepted spatial side.
pub const MAX_SIDE: usize = 8192;

fn valid_side(side: usize) -> bool {
    (MIN_SIDE..=MAX_SIDE).contains(&side) && side.is_power_of_two()
}

/// A batch of same-shaped multi-band images.
///
/// Invariants, enforced at construction: every entry is finite, and both
/// spatial sides are powers of two within [`MIN_SIDE`]..=[`MAX_SIDE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Vec<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl ImageBatch {
    /// Builds a batch from a flat `(n, c, h, w)`-ordered buffer.
    pub fn from_vec(
        data: Vec<f64>,
        (n, c, h, w): (usize, usize, usize, usize),
    ) -> Result<Self, CoreError> {
        if n == 0 || c == 0 {
            return Err(CoreError::EmptyInput);
        }
        if !valid_side(h) {
            return Err(CoreError::InvalidSide { side: h });
        }
        if !valid_side(w) {
            return Err(CoreError::InvalidSide { side: w });
        }
        let expected = n * c * h * w;
        if data.len() != expected {
            return Err(CoreError::LengthMismatch { expected, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite);
        }
        Ok(Self { data, n, c, h, w })
    }

    /// All-zero batch of the given shape.
    pub fn zeros(shape: (usize, usize, usize, usize)) -> Result<Self, CoreError> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Self::from_vec(vec![0.0; len], shape)
    }

    /// Constant-valued batch of the given shape.
    pub fn full(shape: (usize, usize, usize, usize), value: f64) -> Result<Self, CoreError> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Self::from_vec(vec![value; len], shape)
    }

    /// Internal constructor for operations whose outputs provably keep the
    /// invariants (finite arithmetic on already-validated shapes).
    pub(crate) fn from_parts(data: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        Self { data, n, c, h, w }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch_len(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Flat `(n, c, h, w)`-ordered view of the data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Borrowed view of one image in the batch.
    ///
    /// # Panics
    /// Panics if `index >= batch_len()`, like slice indexing.
    pub fn image(&self, index: usize) -> ImageView<'_> {
        assert!(index < self.n, "image index {index} out of range (n = {})", self.n);
        let stride = self.c * self.h * self.w;
        ImageView {
            data: &self.data[index * stride..(index + 1) * stride],
            c: self.c,
            h: self.h,
            w: self.w,
        }
    }

    /// Copies one image out as a single-element batch.
    pub fn single(&self, index: usize) -> ImageBatch {
        let view = self.image(index);
        ImageBatch::from_parts(view.data.to_vec(), 1, self.c, self.h, self.w)
    }

    /// Stacks single-image batches (or concatenates batches) along the batch axis.
    pub fn stack(parts: &[ImageBatch]) -> Result<ImageBatch, CoreError> {
        let first = parts.first().ok_or(CoreError::EmptyInput)?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::new();
        let mut n = 0;
        for part in parts {
            if part.channels() != c || part.height() != h || part.width() != w {
                return Err(CoreError::ShapeMismatch {
                    expected: (0, c, h, w),
                    got: part.shape(),
                });
            }
            data.extend_from_slice(part.data());
            n += part.batch_len();
        }
        Ok(ImageBatch::from_parts(data, n, c, h, w))
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn clip(&self, lo: f64, hi: f64) -> ImageBatch {
        let data = self.data.iter().map(|v| v.clamp(lo, hi)).collect();
        ImageBatch::from_parts(data, self.n, self.c, self.h, self.w)
    }

    /// Mean over every element.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn same_shape(&self, other: &ImageBatch) -> Result<(), CoreError> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }
}

/// Borrowed single image: `(channel, height, width)` slice of a batch.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    data: &'a [f64],
    c: usize,
    h: usize,
    w: usize,
}

impl<'a> ImageView<'a> {
    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Flat `(c, h, w)`-ordered data.
    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    /// One band as a contiguous `h * w` slice.
    pub fn band(&self, channel: usize) -> &'a [f64] {
        assert!(channel < self.c, "band {channel} out of range (c = {})", self.c);
        let stride = self.h * self.w;
        &self.data[channel * stride..(channel + 1) * stride]
    }

    /// Mean over bands at one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let stride = self.h * self.w;
        let offset = y * self.w + x;
        let sum: f64 = (0..self.c).map(|ch| self.data[ch * stride + offset]).sum();
        sum / self.c as f64
    }

    pub fn same_shape(&self, other: &ImageView<'_>) -> Result<(), CoreError> {
        if (self.c, self.h, self.w) != (other.c, other.h, other.w) {
            return Err(CoreError::ShapeMismatch {
                expected: (1, self.c, self.h, self.w),
                got: (1, other.c, other.h, other.w),
            });
        }
        Ok(())
    }

    /// Copies the view into an owned single-image batch.
    pub fn to_batch(&self) -> ImageBatch {
        ImageBatch::from_parts(self.data.to_vec(), 1, self.c, self.h, self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape_and_content() {
        assert!(ImageBatch::from_vec(vec![0.0; 16], (1, 1, 4, 4)).is_ok());
        assert_eq!(
            ImageBatch::from_vec(vec![0.0; 15], (1, 1, 4, 4)),
            Err(CoreError::LengthMismatch { expected: 16, got: 15 })
        );
        assert_eq!(
            ImageBatch::from_vec(vec![0.0; 12], (1, 1, 3, 4)),
            Err(CoreError::InvalidSide { side: 3 })
        );
        assert_eq!(
            ImageBatch::from_vec(vec![f64::NAN; 16], (1, 1, 4, 4)),
            Err(CoreError::NonFinite)
        );
        assert_eq!(ImageBatch::from_vec(vec![], (0, 1, 4, 4)), Err(CoreError::EmptyInput));
    }

    #[test]
    fn image_views_slice_the_right_region() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64).collect();
        let batch = ImageBatch::from_vec(data, (2, 3, 2, 2)).unwrap();
        let second = batch.image(1);
        assert_eq!(second.data()[0], 12.0);
        assert_eq!(second.band(1), &[16.0, 17.0, 18.0, 19.0]);
        assert_eq!(second.luminance(0, 0), (12.0 + 16.0 + 20.0) / 3.0);
    }

    #[test]
    fn stack_reverses_single() {
        let data: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| i as f64).collect();
        let batch = ImageBatch::from_vec(data, (2, 2, 2, 2)).unwrap();
        let restacked = ImageBatch::stack(&[batch.single(0), batch.single(1)]).unwrap();
        assert_eq!(restacked, batch);
    }

    #[test]
    fn clip_bounds_every_element() {
        let batch = ImageBatch::from_vec(vec![-3.0, -0.5, 0.5, 3.0], (1, 1, 2, 2)).unwrap();
        assert_eq!(batch.clip(-1.0, 1.0).data(), &[-1.0, -0.5, 0.5, 1.0]);
    }
}
