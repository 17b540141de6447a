//! Point-wise nonlinearities and the softmax.
//!
//! Softplus is the one that matters: the quantile head feeds its outputs into
//! a cumulative sum, and the strict-monotonicity guarantee of the whole model
//! rests on softplus being strictly positive over the entire f64 range. Both
//! softplus and softmax are written in overflow-safe forms.

use crate::error::{Error, Result};

/// Numerically stable softplus, `ln(1 + e^x)`.
///
/// Evaluated as `max(x, 0) + ln1p(e^{-|x|})`: for large positive `x` the naive
/// form overflows to `inf`, for large negative `x` it underflows to exactly 0.
/// This form returns `x` (correct to machine precision) at `x = 700` and a
/// subnormal-but-positive value at `x = -700`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid, in an overflow-safe form.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: `ln(e^y - 1)` for `y > 0`. Used to pick head biases
/// that start the quantile gaps at a chosen positive value.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1) = y + ln(1 - e^{-y}), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `max(0, x) + slope * min(0, x)`.
#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_derivative(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Default negative slope for the gate's LeakyReLU layers.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Softmax with max-subtraction, so inputs like `[1000, 1000]` neither
/// overflow nor collapse. Errors on empty input.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite {
            block: "softmax input".into(),
        });
    }
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Backward pass through softmax: given the output probabilities `p` and the
/// upstream gradient `dp`, returns the gradient w.r.t. the logits:
/// `dz_j = p_j * (dp_j - <dp, p>)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(&pi, &di)| pi * di).sum();
    p.iter()
        .zip(dp)
        .map(|(&pi, &di)| pi * (di - inner))
        .collect()
}
