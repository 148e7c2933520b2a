//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Built around an eager Wengert tape: ops compute values as they are
//! recorded, `backward` replays the record once in reverse. Single-threaded
//! per tape; tensors may move between threads while no backward is in flight.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use tape::{Gradients, Tape, TensorRef};
pub use tensor::{Real, Tensor};

/// Finite-difference tolerance for gradient checks in the active precision.
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_TOL: Real = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_CHECK_TOL: Real = 1e-6;

/// Central-difference step size matched to the active precision.
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_STEP: Real = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_CHECK_STEP: Real = 1e-5;
