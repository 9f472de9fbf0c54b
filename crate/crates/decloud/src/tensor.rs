//! Bridge between the pure `ImageBatch` representation and runtime tensors.
//!
//! Image math that feeds metrics or schedule arithmetic stays in f64 on the
//! core side; network inputs and outputs cross this boundary, in f32 by
//! default. A tensor produced by [`to_tensor`] carries no autograd history,
//! so round-tripping a network output through [`from_tensor`] also acts as an
//! explicit stop-gradient.

use candle_core::{DType, Device, Tensor};
use decloud_core::ImageBatch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

/// Convert a batch to an `(N, C, H, W)` tensor of the given dtype.
pub fn to_tensor_dtype(b: &ImageBatch, device: &Device, dtype: DType) -> Result<Tensor, Error> {
    let (n, c, h, w) = b.shape();
    let t = Tensor::from_slice(b.data(), (n, c, h, w), device)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

/// Convert a batch to an `(N, C, H, W)` f32 tensor.
pub fn to_tensor(b: &ImageBatch, device: &Device) -> Result<Tensor, Error> {
    to_tensor_dtype(b, device, DType::F32)
}

/// Convert a rank-4 tensor back to an `ImageBatch` (via f64).
///
/// Fails if the tensor contains non-finite values; training and sampling
/// rely on that to surface divergence instead of propagating NaNs.
pub fn from_tensor(t: &Tensor) -> Result<ImageBatch, Error> {
    let dims = t.dims();
    if dims.len() != 4 {
        return Err(Error::Internal(format!(
            "expected a rank-4 tensor, got shape {dims:?}"
        )));
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    ImageBatch::from_vec(data, (n, c, h, w)).map_err(Error::from)
}

/// Per-sample scalar coefficients as an `(N, 1, 1, 1)` tensor for broadcasting.
pub fn coeff_tensor(vals: &[f64], device: &Device, dtype: DType) -> Result<Tensor, Error> {
    let t = Tensor::from_slice(vals, (vals.len(), 1, 1, 1), device)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

/// One standard-normal draw from the seeded stream (Box–Muller), keeping all
/// stochastic behavior on RNGs we control rather than backend internals.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A batch of i.i.d. standard-normal values in the given shape.
pub fn normal_batch(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
) -> Result<ImageBatch, Error> {
    let len = shape.0 * shape.1 * shape.2 * shape.3;
    let data = (0..len).map(|_| standard_normal(rng)).collect();
    ImageBatch::from_vec(data, shape).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        let len = n * c * h * w;
        let data: Vec<f64> = (0..len).map(|i| (i as f64) / (len as f64) - 0.4).collect();
        ImageBatch::from_vec(data, (n, c, h, w)).unwrap()
    }

    #[test]
    fn round_trip_preserves_shape_and_values_to_f32_precision() {
        let b = ramp(2, 3, 4, 4);
        let dev = Device::Cpu;
        let t = to_tensor(&b, &dev).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4, 4]);
        let back = from_tensor(&t).unwrap();
        assert_eq!(back.shape(), b.shape());
        for (a, z) in b.data().iter().zip(back.data()) {
            assert!((a - z).abs() <= 1e-7, "{a} vs {z}");
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let b = ramp(1, 2, 8, 8);
        let dev = Device::Cpu;
        let t = to_tensor_dtype(&b, &dev, DType::F64).unwrap();
        let back = from_tensor(&t).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn from_tensor_rejects_wrong_rank() {
        let dev = Device::Cpu;
        let t = Tensor::zeros((3, 4), DType::F32, &dev).unwrap();
        assert!(from_tensor(&t).is_err());
    }

    #[test]
    fn from_tensor_rejects_non_finite() {
        let dev = Device::Cpu;
        let t = Tensor::from_slice(&[1.0f32, f32::NAN, 0.0, 0.5], (1, 1, 2, 2), &dev).unwrap();
        assert!(from_tensor(&t).is_err());
    }

    #[test]
    fn normal_batch_is_seed_deterministic_with_sane_moments() {
        use rand::SeedableRng;
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let x = normal_batch(&mut a, (4, 2, 16, 16)).unwrap();
        let y = normal_batch(&mut b, (4, 2, 16, 16)).unwrap();
        assert_eq!(x.data(), y.data());
        let n = x.data().len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn coeff_tensor_broadcasts_per_sample() {
        let dev = Device::Cpu;
        let x = Tensor::ones((2, 3, 2, 2), DType::F32, &dev).unwrap();
        let c = coeff_tensor(&[2.0, 5.0], &dev, DType::F32).unwrap();
        let y = x.broadcast_mul(&c).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v[..12].iter().all(|&z| z == 2.0));
        assert!(v[12..].iter().all(|&z| z == 5.0));
    }
}
