//! Sinusoidal timestep embeddings.
//!
//! The classic transformer-style encoding: half the vector holds cosines,
//! half holds sines, over geometrically spaced frequencies from 1 down to
//! 1/10000. Distinct steps below 10⁴ map to distinct vectors, which is what
//! lets a network condition on the step index through ordinary linear layers.

use alloc::vec::Vec;

use crate::CoreError;

const MAX_PERIOD: f64 = 10_000.0;

/// Embeds step index `t` into a `dim`-dimensional vector:
/// `[cos(t·f_0), …, cos(t·f_{d/2−1}), sin(t·f_0), …]` with
/// `f_i = MAX_PERIOD^(−i/(d/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f32>, CoreError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::InvalidArgument("embedding dimension must be even and nonzero"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::exp(-libm::log(MAX_PERIOD) * i as f64 / half as f64);
        out.push(libm::cos(t as f64 * freq) as f32);
    }
    for i in 0..half {
        let freq = libm::exp(-libm::log(MAX_PERIOD) * i as f64 / half as f64);
        out.push(libm::sin(t as f64 * freq) as f32);
    }
    Ok(out)
}
