//! Chemistry-specialist quantile network.
//!
//! Architecture: an affine projection into the hidden width, two residual
//! blocks (layer norm -> dropout -> affine + ReLU -> residual add), then two
//! heads off the shared trunk:
//!
//! - a *gap* head producing K softplus-positive increments, and
//! - a *base* head producing a scalar anchor.
//!
//! The k-th quantile is the anchor plus the prefix sum of the first k gaps.
//! Because every gap is strictly positive, the quantile vector is strictly
//! increasing **by construction** — monotonicity is an architectural property,
//! not a penalty or a post-hoc sort.
//!
//! Outputs pass through a fixed affine transform (`output_mean`,
//! `output_scale`) that the trainer sets from the training-label statistics.
//! The network then learns in standardized label space, where a fixed-size
//! optimizer step is meaningful, while callers always see real cycle counts.
//! The transform is not a learned parameter and is excluded from gradients.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    dropout_backward, dropout_forward, dropout_inference, layer_norm, layer_norm_backward, relu,
    relu_derivative, sigmoid, softplus, softplus_inverse, validate_rate, DropoutMask,
    LinearParams, NormParams, NormTrace, DEFAULT_NORM_EPSILON,
};
use rand_chacha::ChaCha8Rng;

/// One residual block operating at the hidden width.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub norm: NormParams,
    pub linear: LinearParams,
}

impl ResidualBlock {
    fn zeros(hidden: usize, epsilon: f64) -> Result<Self> {
        Ok(ResidualBlock {
            norm: NormParams::new(hidden, epsilon)?,
            linear: LinearParams::zeros(hidden, hidden),
        })
    }

    fn init(hidden: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ResidualBlock {
            norm: NormParams::new(hidden, epsilon)?,
            linear: LinearParams::init(hidden, hidden, rng),
        })
    }

    fn param_count(&self) -> usize {
        self.norm.param_count() + self.linear.param_count()
    }
}

/// Everything needed to build an expert. `initial_gap` sets the head biases
/// so that the untrained network already emits quantile gaps of roughly the
/// right size instead of starting from a degenerate flat spread.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertInit {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub quantile_count: usize,
    pub dropout_rate: f64,
    pub initial_gap: f64,
    pub norm_epsilon: f64,
    pub seed: u64,
}

impl ExpertInit {
    pub fn new(input_dim: usize, hidden_dim: usize, quantile_count: usize, seed: u64) -> Self {
        ExpertInit {
            input_dim,
            hidden_dim,
            quantile_count,
            dropout_rate: 0.0,
            initial_gap: std::f64::consts::LN_2,
            norm_epsilon: DEFAULT_NORM_EPSILON,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub proj: LinearParams,
    pub block1: ResidualBlock,
    pub block2: ResidualBlock,
    /// Hidden -> K increments (pre-softplus).
    pub gap_branch: LinearParams,
    /// Hidden -> 1 anchor.
    pub base_branch: LinearParams,
    pub dropout_rate: f64,
    /// Fixed output transform; see the module docs. Not trained.
    pub output_mean: f64,
    pub output_scale: f64,
}

/// Single-sample expert output. The reconstruction identity
/// `quantiles[k] == base + (gaps[0] + ... + gaps[k])` holds exactly, in the
/// left-to-right floating-point summation order used here.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub quantiles: Vec<f64>,
    pub gaps: Vec<f64>,
    pub base: f64,
}

/// Forward-pass intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    norm1: NormTrace,
    mask1: DropoutMask,
    d1: Matrix,
    z1: Matrix,
    norm2: NormTrace,
    mask2: DropoutMask,
    d2: Matrix,
    z2: Matrix,
    h2: Matrix,
    /// Pre-softplus gap head outputs, `n x K`.
    gap_pre: Matrix,
}

/// Batched expert output: quantiles per row, plus the trace.
#[derive(Debug)]
pub struct ExpertForward {
    pub quantiles: Matrix,
    pub gaps: Matrix,
    pub base: Vec<f64>,
    pub trace: ExpertTrace,
}

/// Whether a forward pass applies dropout (training) or not (inference).
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Infer,
}

impl ExpertParams {
    /// All-zero parameters (identity output transform). Useful as a gradient
    /// accumulator and for exercising the architecture's fixed points.
    pub fn zeros(init: &ExpertInit) -> Result<Self> {
        validate_dims(init)?;
        validate_rate(init.dropout_rate)?;
        Ok(ExpertParams {
            proj: LinearParams::zeros(init.input_dim, init.hidden_dim),
            block1: ResidualBlock::zeros(init.hidden_dim, init.norm_epsilon)?,
            block2: ResidualBlock::zeros(init.hidden_dim, init.norm_epsilon)?,
            gap_branch: LinearParams::zeros(init.hidden_dim, init.quantile_count),
            base_branch: LinearParams::zeros(init.hidden_dim, 1),
            dropout_rate: init.dropout_rate,
            output_mean: 0.0,
            output_scale: 1.0,
        })
    }

    /// Deterministic initialization from `init.seed`: weights are symmetric
    /// fan-in-scaled uniform draws, biases zero except the gap-head bias,
    /// which is `softplus^{-1}(initial_gap)` so the initial quantile spread
    /// is about `K * initial_gap`.
    pub fn init(init: &ExpertInit) -> Result<Self> {
        validate_dims(init)?;
        validate_rate(init.dropout_rate)?;
        if !(init.initial_gap > 0.0) || !init.initial_gap.is_finite() {
            return Err(Error::invalid(
                "initial_gap",
                format!("must be a positive finite number, got {}", init.initial_gap),
            ));
        }
        let mut rng = crate::seeds::rng(init.seed, crate::seeds::stream::EXPERT_INIT, 0);
        let mut p = ExpertParams {
            proj: LinearParams::init(init.input_dim, init.hidden_dim, &mut rng),
            block1: ResidualBlock::init(init.hidden_dim, init.norm_epsilon, &mut rng)?,
            block2: ResidualBlock::init(init.hidden_dim, init.norm_epsilon, &mut rng)?,
            gap_branch: LinearParams::init(init.hidden_dim, init.quantile_count, &mut rng),
            base_branch: LinearParams::init(init.hidden_dim, 1, &mut rng),
            dropout_rate: init.dropout_rate,
            output_mean: 0.0,
            output_scale: 1.0,
        };
        let gap_bias = softplus_inverse(init.initial_gap);
        for b in p.gap_branch.bias.iter_mut() {
            *b = gap_bias;
        }
        Ok(p)
    }

    /// Set the fixed output transform. `scale` must be strictly positive so
    /// the monotone head stays monotone.
    pub fn set_output_transform(&mut self, mean: f64, scale: f64) -> Result<()> {
        if !(scale > 0.0) || !scale.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(
                "output transform",
                format!("scale must be positive and finite, got mean={mean}, scale={scale}"),
            ));
        }
        self.output_mean = mean;
        self.output_scale = scale;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn quantile_count(&self) -> usize {
        self.gap_branch.out_dim()
    }

    /// Batched forward pass; `x` is one sample per row.
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<ExpertForward> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("expert input", self.input_dim(), x.cols()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                block: "expert input".into(),
            });
        }

        let rate = self.dropout_rate;
        let dropout = |m: &Matrix, mode: &mut Mode| -> Result<(Matrix, DropoutMask)> {
            match mode {
                Mode::Train(rng) => dropout_forward(m, rate, *rng),
                Mode::Infer => Ok(dropout_inference(m)),
            }
        };
        let mut mode = mode;

        let h0 = self.proj.forward(x)?;

        let (n1, norm1) = layer_norm(&h0, &self.block1.norm)?;
        let (d1, mask1) = dropout(&n1, &mut mode)?;
        let z1 = self.block1.linear.forward(&d1)?;
        let mut h1 = z1.map(relu);
        h1.add_assign(&h0)?;

        let (n2, norm2) = layer_norm(&h1, &self.block2.norm)?;
        let (d2, mask2) = dropout(&n2, &mut mode)?;
        let z2 = self.block2.linear.forward(&d2)?;
        let mut h2 = z2.map(relu);
        h2.add_assign(&h1)?;

        let gap_pre = self.gap_branch.forward(&h2)?;
        let base_raw = self.base_branch.forward(&h2)?;

        let n = x.rows();
        let k = self.quantile_count();
        let mut gaps = Matrix::zeros(n, k);
        let mut quantiles = Matrix::zeros(n, k);
        let mut base = vec![0.0; n];
        for i in 0..n {
            let b = self.output_mean + self.output_scale * base_raw[(i, 0)];
            base[i] = b;
            let gp = gap_pre.row(i);
            let gi = gaps.row_mut(i);
            for j in 0..k {
                gi[j] = self.output_scale * softplus(gp[j]);
            }
            let qi = quantiles.row_mut(i);
            let mut prefix = 0.0;
            for j in 0..k {
                prefix += gi[j];
                qi[j] = b + prefix;
            }
            // A gap below one ulp of the running quantile would make two
            // levels tie after rounding; nudge to the next representable
            // value so strict ordering survives even that.
            for j in 1..k {
                if qi[j] <= qi[j - 1] {
                    qi[j] = qi[j - 1].next_up();
                }
            }
        }

        Ok(ExpertForward {
            quantiles,
            gaps,
            base,
            trace: ExpertTrace {
                norm1,
                mask1,
                d1,
                z1,
                norm2,
                mask2,
                d2,
                z2,
                h2,
                gap_pre,
            },
        })
    }

    /// Single-sample inference.
    pub fn predict_one(&self, x: &[f64]) -> Result<ExpertOutput> {
        let fwd = self.forward(&Matrix::from_row(x), Mode::Infer)?;
        Ok(ExpertOutput {
            quantiles: fwd.quantiles.row(0).to_vec(),
            gaps: fwd.gaps.row(0).to_vec(),
            base: fwd.base[0],
        })
    }

    /// Backward pass: propagate `d_quantiles` (same shape as the forward
    /// quantile matrix) through the head, trunk, and projection. Parameter
    /// gradients are accumulated into `grads`; returns the input gradient.
    pub fn backward(
        &self,
        x: &Matrix,
        fwd: &ExpertForward,
        d_quantiles: &Matrix,
        grads: &mut ExpertParams,
    ) -> Matrix {
        let n = x.rows();
        let k = self.quantile_count();
        debug_assert_eq!(d_quantiles.rows(), n);
        debug_assert_eq!(d_quantiles.cols(), k);
        let t = &fwd.trace;

        // Head: q[j] = base_out + sum_{l<=j} gap_out[l]
        //   d gap_out[j] = sum_{l>=j} dq[l]   (suffix sums)
        //   d base_out   = sum_j dq[j]
        // then through the output transform and softplus.
        let mut d_gap_pre = Matrix::zeros(n, k);
        let mut d_base_raw = Matrix::zeros(n, 1);
        for i in 0..n {
            let dq = d_quantiles.row(i);
            let gp = t.gap_pre.row(i);
            let dg = d_gap_pre.row_mut(i);
            let mut suffix = 0.0;
            for j in (0..k).rev() {
                suffix += dq[j];
                dg[j] = suffix * self.output_scale * sigmoid(gp[j]);
            }
            d_base_raw[(i, 0)] = suffix * self.output_scale;
        }

        let mut dh2 = self.gap_branch.backward(&t.h2, &d_gap_pre, &mut grads.gap_branch);
        let dh2_base = self
            .base_branch
            .backward(&t.h2, &d_base_raw, &mut grads.base_branch);
        dh2.add_assign(&dh2_base).expect("head shapes agree");

        // Block 2: h2 = h1 + relu(z2), z2 = linear(d2), d2 = dropout(norm(h1))
        let mut dz2 = dh2.clone();
        for (g, z) in dz2.data_mut().iter_mut().zip(t.z2.data()) {
            *g *= relu_derivative(*z);
        }
        let dd2 = self
            .block2
            .linear
            .backward(&t.d2, &dz2, &mut grads.block2.linear);
        let dn2 = dropout_backward(&dd2, &t.mask2);
        let mut dh1 = layer_norm_backward(&self.block2.norm, &t.norm2, &dn2, &mut grads.block2.norm);
        dh1.add_assign(&dh2).expect("residual shapes agree");

        // Block 1: h1 = h0 + relu(z1)
        let mut dz1 = dh1.clone();
        for (g, z) in dz1.data_mut().iter_mut().zip(t.z1.data()) {
            *g *= relu_derivative(*z);
        }
        let dd1 = self
            .block1
            .linear
            .backward(&t.d1, &dz1, &mut grads.block1.linear);
        let dn1 = dropout_backward(&dd1, &t.mask1);
        let mut dh0 = layer_norm_backward(&self.block1.norm, &t.norm1, &dn1, &mut grads.block1.norm);
        dh0.add_assign(&dh1).expect("residual shapes agree");

        self.proj.backward(x, &dh0, &mut grads.proj)
    }

    /// Zero-valued gradient accumulator with matching shapes.
    pub fn zeros_like(&self) -> ExpertParams {
        ExpertParams {
            proj: LinearParams::zeros(self.proj.in_dim(), self.proj.out_dim()),
            block1: ResidualBlock {
                norm: self.block1.norm.zeros_like(),
                linear: LinearParams::zeros(self.hidden_dim(), self.hidden_dim()),
            },
            block2: ResidualBlock {
                norm: self.block2.norm.zeros_like(),
                linear: LinearParams::zeros(self.hidden_dim(), self.hidden_dim()),
            },
            gap_branch: LinearParams::zeros(self.hidden_dim(), self.quantile_count()),
            base_branch: LinearParams::zeros(self.hidden_dim(), 1),
            dropout_rate: self.dropout_rate,
            output_mean: 0.0,
            output_scale: self.output_scale,
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
            + self.block1.param_count()
            + self.block2.param_count()
            + self.gap_branch.param_count()
            + self.base_branch.param_count()
    }

    /// Named parameter blocks in flattening order: `(name, length)`.
    pub fn layout(&self) -> Vec<(String, usize)> {
        vec![
            ("proj.weight".into(), self.proj.weight.data().len()),
            ("proj.bias".into(), self.proj.bias.len()),
            ("block1.norm.gamma".into(), self.block1.norm.gamma.len()),
            ("block1.norm.beta".into(), self.block1.norm.beta.len()),
            ("block1.linear.weight".into(), self.block1.linear.weight.data().len()),
            ("block1.linear.bias".into(), self.block1.linear.bias.len()),
            ("block2.norm.gamma".into(), self.block2.norm.gamma.len()),
            ("block2.norm.beta".into(), self.block2.norm.beta.len()),
            ("block2.linear.weight".into(), self.block2.linear.weight.data().len()),
            ("block2.linear.bias".into(), self.block2.linear.bias.len()),
            ("gap_branch.weight".into(), self.gap_branch.weight.data().len()),
            ("gap_branch.bias".into(), self.gap_branch.bias.len()),
            ("base_branch.weight".into(), self.base_branch.weight.data().len()),
            ("base_branch.bias".into(), self.base_branch.bias.len()),
        ]
    }

    /// Append all trainable parameters to `out` in layout order. The output
    /// transform is intentionally excluded: it is fixed, not trained.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.proj.weight.data());
        out.extend_from_slice(&self.proj.bias);
        for block in [&self.block1, &self.block2] {
            out.extend_from_slice(&block.norm.gamma);
            out.extend_from_slice(&block.norm.beta);
            out.extend_from_slice(block.linear.weight.data());
            out.extend_from_slice(&block.linear.bias);
        }
        out.extend_from_slice(self.gap_branch.weight.data());
        out.extend_from_slice(&self.gap_branch.bias);
        out.extend_from_slice(self.base_branch.weight.data());
        out.extend_from_slice(&self.base_branch.bias);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    /// Load trainable parameters from a flat slice in layout order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("expert flat parameters", self.param_count(), flat.len()));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        take(self.proj.weight.data_mut());
        take(&mut self.proj.bias);
        for block in [&mut self.block1, &mut self.block2] {
            take(&mut block.norm.gamma);
            take(&mut block.norm.beta);
            take(block.linear.weight.data_mut());
            take(&mut block.linear.bias);
        }
        take(self.gap_branch.weight.data_mut());
        take(&mut self.gap_branch.bias);
        take(self.base_branch.weight.data_mut());
        take(&mut self.base_branch.bias);
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }
}

fn validate_dims(init: &ExpertInit) -> Result<()> {
    if init.input_dim == 0 {
        return Err(Error::invalid("input_dim", "must be at least 1"));
    }
    if init.hidden_dim == 0 {
        return Err(Error::invalid("hidden_dim", "must be at least 1"));
    }
    if init.quantile_count < 2 {
        return Err(Error::invalid(
            "quantile_count",
            format!("need at least 2 quantiles, got {}", init.quantile_count),
        ));
    }
    Ok(())
}
