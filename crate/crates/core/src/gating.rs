//! Softmax gate over experts.
//!
//! Four affine layers with LeakyReLU between them, softmax at the end. The
//! gate sees the same full feature vector as the experts — the chemistry
//! one-hot block alone would make routing trivial, but letting the gate read
//! the whole cell description allows soft blends when curve shape disagrees
//! with the label from chemistry.
//!
//! The final layer is zero-initialized so an untrained gate outputs exactly
//! the uniform mixture; routing is then learned from zero signal rather than
//! from arbitrary init noise.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    leaky_relu, leaky_relu_derivative, softmax, softmax_backward, LinearParams,
    DEFAULT_LEAKY_SLOPE,
};

/// Per-sample mixture weights: nonnegative, summing to 1 (within fp).
pub type GateWeights = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct GatingInit {
    pub input_dim: usize,
    pub hidden_dims: [usize; 3],
    pub expert_count: usize,
    pub negative_slope: f64,
    pub seed: u64,
}

pub const DEFAULT_GATE_HIDDEN: [usize; 3] = [256, 128, 64];

impl GatingInit {
    pub fn new(input_dim: usize, expert_count: usize, seed: u64) -> Self {
        GatingInit {
            input_dim,
            hidden_dims: DEFAULT_GATE_HIDDEN,
            expert_count,
            negative_slope: DEFAULT_LEAKY_SLOPE,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// input -> h1 -> h2 -> h3 -> expert_count
    pub layers: Vec<LinearParams>,
    pub negative_slope: f64,
}

/// Intermediates for the backward pass: pre-activations of the three hidden
/// layers, their activations, and the softmax outputs.
#[derive(Debug, Clone)]
pub struct GatingTrace {
    z: [Matrix; 3],
    a: [Matrix; 3],
    probs: Matrix,
}

#[derive(Debug)]
pub struct GatingForward {
    /// One row of expert weights per input row.
    pub probs: Matrix,
    pub trace: GatingTrace,
}

impl GatingParams {
    pub fn zeros(init: &GatingInit) -> Result<Self> {
        Self::build(init, |i, o, _| LinearParams::zeros(i, o))
    }

    pub fn init(init: &GatingInit) -> Result<Self> {
        let mut rng = crate::seeds::rng(init.seed, crate::seeds::stream::GATE_INIT, 0);
        Self::build(init, |i, o, last| {
            if last {
                LinearParams::zeros(i, o)
            } else {
                LinearParams::init(i, o, &mut rng)
            }
        })
    }

    fn build(
        init: &GatingInit,
        mut make: impl FnMut(usize, usize, bool) -> LinearParams,
    ) -> Result<Self> {
        if init.input_dim == 0 {
            return Err(Error::invalid("gating input_dim", "must be at least 1"));
        }
        if init.expert_count == 0 {
            return Err(Error::invalid("expert_count", "must be at least 1"));
        }
        if init.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("gating hidden_dims", "must all be at least 1"));
        }
        if !init.negative_slope.is_finite() || init.negative_slope < 0.0 {
            return Err(Error::invalid(
                "negative_slope",
                format!("must be finite and nonnegative, got {}", init.negative_slope),
            ));
        }
        let dims = [
            init.input_dim,
            init.hidden_dims[0],
            init.hidden_dims[1],
            init.hidden_dims[2],
            init.expert_count,
        ];
        let layers = (0..4)
            .map(|l| make(dims[l], dims[l + 1], l == 3))
            .collect();
        Ok(GatingParams {
            layers,
            negative_slope: init.negative_slope,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn expert_count(&self) -> usize {
        self.layers[3].out_dim()
    }

    pub fn hidden_dims(&self) -> [usize; 3] {
        [
            self.layers[0].out_dim(),
            self.layers[1].out_dim(),
            self.layers[2].out_dim(),
        ]
    }

    pub fn forward(&self, x: &Matrix) -> Result<GatingForward> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("gating input", self.input_dim(), x.cols()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                block: "gating input".into(),
            });
        }
        let slope = self.negative_slope;
        let z1 = self.layers[0].forward(x)?;
        let a1 = z1.map(|v| leaky_relu(v, slope));
        let z2 = self.layers[1].forward(&a1)?;
        let a2 = z2.map(|v| leaky_relu(v, slope));
        let z3 = self.layers[2].forward(&a2)?;
        let a3 = z3.map(|v| leaky_relu(v, slope));
        let logits = self.layers[3].forward(&a3)?;

        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.rows() {
            let p = softmax(logits.row(i))?;
            probs.row_mut(i).copy_from_slice(&p);
        }
        Ok(GatingForward {
            probs: probs.clone(),
            trace: GatingTrace {
                z: [z1, z2, z3],
                a: [a1, a2, a3],
                probs,
            },
        })
    }

    /// Single-sample wrapper.
    pub fn weights_one(&self, x: &[f64]) -> Result<GateWeights> {
        Ok(self.forward(&Matrix::from_row(x))?.probs.row(0).to_vec())
    }

    /// Backward pass from an upstream gradient on the mixture weights.
    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient.
    pub fn backward(
        &self,
        x: &Matrix,
        fwd: &GatingForward,
        d_probs: &Matrix,
        grads: &mut GatingParams,
    ) -> Matrix {
        let t = &fwd.trace;
        let n = x.rows();
        let e = self.expert_count();
        debug_assert_eq!(d_probs.rows(), n);
        debug_assert_eq!(d_probs.cols(), e);

        // Through softmax, per row.
        let mut d_logits = Matrix::zeros(n, e);
        for i in 0..n {
            let dz = softmax_backward(t.probs.row(i), d_probs.row(i));
            d_logits.row_mut(i).copy_from_slice(&dz);
        }

        let slope = self.negative_slope;
        let mut da3 = self.layers[3].backward(&t.a[2], &d_logits, &mut grads.layers[3]);
        for (g, z) in da3.data_mut().iter_mut().zip(t.z[2].data()) {
            *g *= leaky_relu_derivative(*z, slope);
        }
        let mut da2 = self.layers[2].backward(&t.a[1], &da3, &mut grads.layers[2]);
        for (g, z) in da2.data_mut().iter_mut().zip(t.z[1].data()) {
            *g *= leaky_relu_derivative(*z, slope);
        }
        let mut da1 = self.layers[1].backward(&t.a[0], &da2, &mut grads.layers[1]);
        for (g, z) in da1.data_mut().iter_mut().zip(t.z[0].data()) {
            *g *= leaky_relu_derivative(*z, slope);
        }
        self.layers[0].backward(x, &da1, &mut grads.layers[0])
    }

    pub fn zeros_like(&self) -> GatingParams {
        GatingParams {
            layers: self
                .layers
                .iter()
                .map(|l| LinearParams::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            negative_slope: self.negative_slope,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("gate.layer{i}.weight"), l.weight.data().len()));
            out.push((format!("gate.layer{i}.bias"), l.bias.len()));
        }
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("gating flat parameters", self.param_count(), flat.len()));
        }
        let mut pos = 0;
        for l in self.layers.iter_mut() {
            let w = l.weight.data_mut();
            w.copy_from_slice(&flat[pos..pos + w.len()]);
            pos += w.len();
            let b_len = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + b_len]);
            pos += b_len;
        }
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }
}
