//! Layer normalization over the feature axis, with learnable scale and shift.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Learnable normalization parameters. `epsilon` guards the division for
/// near-constant inputs and must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;

impl NormParams {
    /// Identity-initialized (`gamma = 1`, `beta = 0`) normalization.
    pub fn new(dim: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be strictly positive"));
        }
        Ok(NormParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            epsilon,
        })
    }

    pub fn zeros_like(&self) -> NormParams {
        NormParams {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
            epsilon: self.epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

/// Per-row intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct NormTrace {
    /// Standardized input `(x - mean) / sqrt(var + eps)`, same shape as `x`.
    pub xhat: Matrix,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Normalize each row of `x` to zero mean and unit **population** variance
/// over the feature axis, then apply `gamma`/`beta`.
pub fn layer_norm(x: &Matrix, p: &NormParams) -> Result<(Matrix, NormTrace)> {
    let d = p.dim();
    if x.cols() != d {
        return Err(Error::dim("layer_norm input", d, x.cols()));
    }
    if d == 0 {
        return Err(Error::EmptyInput("layer_norm".into()));
    }
    let n = x.rows();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let xi = x.row(i);
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + p.epsilon).sqrt();
        inv_std[i] = s;
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (xi[j] - mean) * s;
        }
        let yi = y.row_mut(i);
        for j in 0..d {
            yi[j] = xh[j] * p.gamma[j] + p.beta[j];
        }
    }
    Ok((y, NormTrace { xhat, inv_std }))
}

/// Backward pass. Accumulates `gamma`/`beta` gradients into `grads` and
/// returns the gradient w.r.t. the input.
///
/// Per row, with `m1 = mean(dxhat)` and `m2 = mean(dxhat * xhat)`:
/// `dx = inv_std * (dxhat - m1 - xhat * m2)`.
pub fn layer_norm_backward(
    p: &NormParams,
    trace: &NormTrace,
    dy: &Matrix,
    grads: &mut NormParams,
) -> Matrix {
    let d = p.dim();
    let n = dy.rows();
    debug_assert_eq!(dy.cols(), d);
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let dyi = dy.row(i);
        let xh = trace.xhat.row(i);
        for j in 0..d {
            grads.gamma[j] += dyi[j] * xh[j];
            grads.beta[j] += dyi[j];
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dyi[j] * p.gamma[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let s = trace.inv_std[i];
        let dxi = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyi[j] * p.gamma[j];
            dxi[j] = s * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Bare normalization of a single vector with explicit `eps >= 0`; the
/// parameterized path always has `eps > 0`, this exists for exact-arithmetic
/// checks and one-off uses.
pub fn normalize_vec(x: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| (v - mean) * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_pair_normalizes_to_plus_minus_one() {
        // mean 2, population variance ((1-2)^2 + (3-2)^2)/2 = 1.
        let y = normalize_vec(&[1.0, 3.0], 0.0);
        assert_eq!(y, vec![-1.0, 1.0]);
    }

    #[test]
    fn identity_params_give_unit_population_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_row(
            &(0..64).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>(),
        );
        let p = NormParams::new(64, 1e-12).unwrap();
        let (y, _) = layer_norm(&x, &p).unwrap();
        let row = y.row(0);
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert_relative_eq!(var, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_epsilon_is_rejected_at_construction() {
        assert!(NormParams::new(4, 0.0).is_err());
        assert!(NormParams::new(4, -1.0).is_err());
        assert!(NormParams::new(4, 1e-12).is_ok());
    }

    #[test]
    fn constant_input_is_guarded_by_epsilon() {
        // Population variance 0: the division is saved by eps and the output
        // is beta exactly (xhat = 0).
        let p = NormParams::new(3, 1e-5).unwrap();
        let x = Matrix::from_row(&[4.0, 4.0, 4.0]);
        let (y, _) = layer_norm(&x, &p).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let mut p = NormParams::new(d, 1e-5).unwrap();
        for g in p.gamma.iter_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in p.beta.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let mut x = Matrix::zeros(2, d);
        for v in x.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut dy = Matrix::zeros(2, d);
        for v in dy.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |p: &NormParams, x: &Matrix| -> f64 {
            let (y, _) = layer_norm(x, p).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };

        let mut grads = p.zeros_like();
        let (_, trace) = layer_norm(&x, &p).unwrap();
        let dx = layer_norm_backward(&p, &trace, &dy, &mut grads);

        let h = 1e-6;
        for j in 0..d {
            let mut pp = p.clone();
            pp.gamma[j] += h;
            let mut pm = p.clone();
            pm.gamma[j] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert_relative_eq!(grads.gamma[j], fd, epsilon = 1e-6);

            let mut pp = p.clone();
            pp.beta[j] += h;
            let mut pm = p.clone();
            pm.beta[j] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert_relative_eq!(grads.beta[j], fd, epsilon = 1e-6);
        }
        for i in 0..2 {
            for j in 0..d {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
                assert_relative_eq!(dx[(i, j)], fd, epsilon = 1e-6);
            }
        }
    }
}
