//! Minimal CPU neural-network building blocks with explicit backward passes.
//!
//! Every layer separates its forward computation from the cache needed to
//! differentiate it, so one network can be evaluated several times (for
//! example on real and synthetic batches) and each evaluation backpropagated
//! independently. Gradients flow into caller-owned [`Grads`] buffers, which
//! lets the caller decide exactly which parameter groups receive updates.
//!
//! Layers are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod conv;
mod init;
mod layer;
mod linear;
mod norm;
mod optim;
mod pool;
mod sequential;

use std::fmt::{Debug, Display};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub use conv::{col2im, im2col, Conv2d, ConvGeom, ConvTranspose2d};
pub use init::Init;
pub use layer::{Cache, Layer};
pub use linear::Linear;
pub use norm::BatchNorm;
pub use optim::{Adam, AdamConfig, AdamState};
pub use pool::MaxPool2d;
pub use sequential::{Grads, Mode, Sequential, Tape};

/// Dynamically shaped, row-major tensor used throughout the crate.
pub type Tensor<T> = ArrayD<T>;

/// Floating-point element type supported by the layers.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Enables flush-to-zero / denormals-are-zero for the calling thread.
///
/// Gradients of lightly initialized networks drift into the subnormal range,
/// where x86 arithmetic slows down by an order of magnitude. The mode is
/// deterministic, so results stay reproducible run to run.
#[allow(deprecated)]
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only toggles the FTZ (bit 15) and DAZ (bit 6) flags of MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
