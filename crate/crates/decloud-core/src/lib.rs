//! Allocation-only numerics for diffusion-based cloud removal.
//!
//! Everything in this crate is pure math over plain buffers:
//!
//! - [`batch`]: the rank-4 `(batch, channel, height, width)` image container.
//! - [`schedule`]: noise-schedule construction, forward noising, clean-image
//!   recovery from predicted noise, the ancestral posterior step, and the
//!   deterministic accelerated (DDIM-style) step.
//! - [`fusion`]: per-pixel weighted blending of the diffusion estimate with a
//!   reference model's prediction, including the inference-time weight floor.
//! - [`embed`]: sinusoidal timestep embeddings.
//! - [`metrics`]: PSNR and SSIM.
//! - [`cloud`]: binary cloud masks, coverage statistics, and procedural
//!   synthetic cloud overlays.
//! - [`geom`]: bilinear resizing and aligned center crops.
//!
//! The crate is `no_std` (with `alloc`); IO, networks, and orchestration live
//! in the companion `decloud` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod batch;
pub mod cloud;
pub mod embed;
pub mod fusion;
pub mod geom;
pub mod metrics;
pub mod schedule;

pub use batch::{ImageBatch, ImageView};

/// Errors shared by all numeric modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreError {
    /// Operands must share their full `(n, c, h, w)` shape.
    ShapeMismatch {
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    /// Spatial sides must be powers of two within the supported bounds.
    InvalidSide { side: usize },
    /// Buffer length does not factor into the requested shape.
    LengthMismatch { expected: usize, got: usize },
    /// A non-finite value reached a constructor that guarantees finiteness.
    NonFinite,
    /// An operation that needs at least one element got none.
    EmptyInput,
    /// Timestep index outside `1..=t_max` (or `0..=t_max` where 0 is legal).
    StepOutOfRange { t: usize, t_max: usize },
    /// A step pair that must satisfy `t_prev < t` does not.
    StepOrder { t: usize, t_prev: usize },
    /// Scalar argument outside its documented domain.
    InvalidArgument(&'static str),
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected:?}, got {got:?}")
            }
            CoreError::InvalidSide { side } => {
                write!(f, "spatial side {side} is not a supported power of two")
            }
            CoreError::LengthMismatch { expected, got } => {
                write!(f, "buffer length {got} does not match shape ({expected} elements)")
            }
            CoreError::NonFinite => write!(f, "non-finite value in image data"),
            CoreError::EmptyInput => write!(f, "empty input"),
            CoreError::StepOutOfRange { t, t_max } => {
                write!(f, "timestep {t} outside schedule range (t_max = {t_max})")
            }
            CoreError::StepOrder { t, t_prev } => {
                write!(f, "target step {t_prev} must precede current step {t}")
            }
            CoreError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
