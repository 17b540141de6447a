//! Affine layer `y = W x + b` with batched forward and backward passes.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use rand::Rng;

/// Parameters of one affine map. `weight` is `out_dim x in_dim`, row-major,
/// so each output's weights form a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Symmetric uniform init scaled by fan-in: `U(-1/sqrt(in), +1/sqrt(in))`,
    /// biases zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for v in weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        LinearParams {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// `y[i] = W x[i] + b` for every row `i` of the batch.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim("linear forward input", self.in_dim(), x.cols()));
        }
        let mut y = Matrix::zeros(x.rows(), self.out_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (o, out) in yi.iter_mut().enumerate() {
                *out = dot(self.weight.row(o), xi) + self.bias[o];
            }
        }
        Ok(y)
    }

    /// Backward pass. Given the forward input `x` and upstream gradient `dy`
    /// (same shape as the forward output), accumulates parameter gradients
    /// into `grads` and returns the gradient w.r.t. `x`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut LinearParams) -> Matrix {
        debug_assert_eq!(dy.cols(), self.out_dim());
        debug_assert_eq!(x.rows(), dy.rows());
        let mut dx = Matrix::zeros(x.rows(), self.in_dim());
        for i in 0..x.rows() {
            let dyi = dy.row(i);
            let xi = x.row(i);
            // dW[o] += dy[i,o] * x[i];  db[o] += dy[i,o];  dx[i] += dy[i,o] * W[o]
            let dxi = dx.row_mut(i);
            for (o, &g) in dyi.iter().enumerate() {
                axpy(grads.weight.row_mut(o), g, xi);
                grads.bias[o] += g;
                axpy(dxi, g, self.weight.row(o));
            }
        }
        dx
    }
}
