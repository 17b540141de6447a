//! Inverted dropout.
//!
//! Kept units are scaled by `1/(1-rate)` at train time so the expected
//! activation matches eval mode and inference needs no correction. A rate of
//! exactly 0 takes a fast path that draws nothing from the RNG, which makes
//! "dropout disabled" bit-identical between train and eval modes.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;

/// Multiplicative mask produced at train time: entries are either `0` or
/// `1/(1-rate)`. The backward pass reuses it unchanged.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    mask: Option<Matrix>,
}

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask { mask: None }
    }
}

pub fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout rate",
            format!("must be in [0, 1), got {rate}"),
        ));
    }
    Ok(())
}

/// Train-time forward pass. `rate = 0` returns the input unchanged (and an
/// identity mask) without consuming randomness.
pub fn dropout_forward(x: &Matrix, rate: f64, rng: &mut impl Rng) -> Result<(Matrix, DropoutMask)> {
    validate_rate(rate)?;
    if rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.data_mut() {
        *m = if rng.gen::<f64>() >= rate { scale } else { 0.0 };
    }
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
        *v *= *m;
    }
    Ok((y, DropoutMask { mask: Some(mask) }))
}

/// Inference-time forward pass: identity, regardless of rate.
pub fn dropout_inference(x: &Matrix) -> (Matrix, DropoutMask) {
    (x.clone(), DropoutMask::identity())
}

pub fn dropout_backward(dy: &Matrix, mask: &DropoutMask) -> Matrix {
    match &mask.mask {
        None => dy.clone(),
        Some(m) => {
            let mut dx = dy.clone();
            for (v, s) in dx.data_mut().iter_mut().zip(m.data()) {
                *v *= *s;
            }
            dx
        }
    }
}
