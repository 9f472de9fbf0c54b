//! Cloud removal for satellite imagery by conditional denoising diffusion,
//! fused per pixel with a deterministic reference prediction.
//!
//! The companion `decloud-core` crate holds the numerics (schedules, fusion
//! arithmetic, metrics, synthetic clouds); this crate adds everything that
//! needs a tensor runtime or an operating system: the two U-Nets, the
//! reference baseline, staged training, the sampler, dataset IO, evaluation,
//! and the command-line front end.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod plot;
pub mod reference;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::Error;

use candle_core::Device;

/// Environment variable selecting the compute device (`cpu` by default).
pub const DEVICE_ENV: &str = "DECLOUD_DEVICE";

/// Resolve the compute device from [`DEVICE_ENV`].
///
/// Only `cpu` is available in this build; any other value is reported as a
/// configuration error rather than silently falling back.
pub fn device() -> Result<Device, Error> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(Device::Cpu),
        Ok(v) => Err(Error::Config(format!(
            "unsupported device '{v}' (this build supports: cpu)"
        ))),
    }
}
