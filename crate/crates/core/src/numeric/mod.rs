//! Dense matrix kernels, deterministic RNG, activations, and the
//! finite-difference gradient checker used by every trainable layer.
//!
//! Everything here works in 64-bit floats. Training and verification need
//! the headroom; 32-bit is acceptable for inference only.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckable, GradReport};
pub use rng::SeededRng;
pub use tensor::Tensor2D;

use crate::error::{Error, Result};

/// Logistic sigmoid. Saturates instead of overflowing; never NaN for finite x.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hyperbolic tangent.
#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Softmax with max-subtraction for stability.
///
/// Output entries are nonnegative and sum to 1; adding a constant to every
/// input leaves the output unchanged.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::argument("softmax of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

/// Softmax into a preallocated buffer. `out.len()` must equal `v.len()` and
/// `v` must be non-empty; callers guarantee both.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), out.len());
    debug_assert!(!v.is_empty());
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Backward pass of a row softmax: given `a = softmax(raw)` and `da = dL/da`,
/// writes `dL/draw` into `draw`.
pub(crate) fn softmax_backward_into(a: &[f64], da: &[f64], draw: &mut [f64]) {
    let dot: f64 = a.iter().zip(da).map(|(ai, di)| ai * di).sum();
    for ((d, &ai), &di) in draw.iter_mut().zip(a).zip(da) {
        *d = ai * (di - dot);
    }
}
