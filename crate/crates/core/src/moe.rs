//! The assembled mixture model and the quantile-score loss.
//!
//! An [`MoEModel`] bundles one expert per chemistry (in the fixed order
//! LFP, NCA, NMC, LCO, NMC_LCO, possibly with absent chemistries skipped),
//! the softmax gate, the quantile levels, and the feature scaler fit at
//! training time. Prediction standardizes the raw features once, runs every
//! expert and the gate on the same standardized input, and combines the
//! expert quantile vectors convexly:
//!
//! ```text
//! Q(tau_k | x) = sum_i p_i(x) * Q_i(tau_k | x)
//! ```
//!
//! A convex combination of strictly increasing vectors is strictly
//! increasing, so the mixture inherits the experts' non-crossing guarantee;
//! as in the expert's own head, a nudge-up repair pass absorbs the
//! sub-ulp case where two combined entries round to the same float.
//!
//! The quantile score (pinball loss) averaged over the K levels,
//!
//! ```text
//! QS(y, q) = (1/K) * sum_k max(tau_k * u_k, (tau_k - 1) * u_k),  u_k = y - q_k
//! ```
//!
//! is the single training loss for both stages; its subgradient in `q` is
//! what the training loop feeds back through the combination.

use crate::dataio::{Chemistry, FeatureScaler};
use crate::dist::{PredictiveDistribution, QuantileLevels, QuantileVector};
use crate::error::{Error, Result};
use crate::expert::{ExpertParams, Mode};
use crate::gating::{GateWeights, GatingParams};
use crate::linalg::Matrix;

/// Version of the feature layout and parameter block ordering. Bump on any
/// change to either; saved models carry it and loading rejects mismatches.
pub const SCHEMA_VERSION: u32 = 1;

/// Pinball loss averaged over levels. `quantiles` and `levels` must pair up.
pub fn quantile_score(y: f64, quantiles: &[f64], levels: &[f64]) -> f64 {
    assert_eq!(
        quantiles.len(),
        levels.len(),
        "quantile/level arity mismatch"
    );
    let k = quantiles.len() as f64;
    let sum: f64 = quantiles
        .iter()
        .zip(levels)
        .map(|(&q, &tau)| {
            let u = y - q;
            (tau * u).max((tau - 1.0) * u)
        })
        .sum();
    sum / k
}

/// Mean pinball loss over a batch: rows of `quantiles` against `ys`.
pub fn quantile_score_batch(ys: &[f64], quantiles: &Matrix, levels: &[f64]) -> f64 {
    assert_eq!(ys.len(), quantiles.rows(), "label/row count mismatch");
    let sum: f64 = ys
        .iter()
        .zip(quantiles.iter_rows())
        .map(|(&y, row)| quantile_score(y, row, levels))
        .sum();
    sum / ys.len() as f64
}

/// Accumulate `scale * d QS(y, q) / d q_k` into `dq`. The loss is piecewise
/// linear; at the kink (`u = 0`) the `tau - 1` branch's slope is used.
pub(crate) fn quantile_score_grad_into(
    y: f64,
    quantiles: &[f64],
    levels: &[f64],
    scale: f64,
    dq: &mut [f64],
) {
    let k = quantiles.len() as f64;
    for ((&q, &tau), d) in quantiles.iter().zip(levels).zip(dq.iter_mut()) {
        let u = y - q;
        let coef = if u > 0.0 { tau } else { tau - 1.0 };
        *d += scale * (-coef) / k;
    }
}

/// Nudge exact ties in a combined quantile row up to the next float so the
/// strict-increase invariant survives rounding. A no-op unless two adjacent
/// combined values collided, which takes adversarially tiny expert gaps.
fn repair_ties(row: &mut [f64]) {
    for i in 1..row.len() {
        if row[i] <= row[i - 1] {
            row[i] = row[i - 1].next_up();
        }
    }
}

/// Experts + gate + levels + feature scaler: the trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    experts: Vec<(Chemistry, ExpertParams)>,
    gate: GatingParams,
    levels: QuantileLevels,
    scaler: FeatureScaler,
    schema_version: u32,
}

impl MoEModel {
    pub fn new(
        experts: Vec<(Chemistry, ExpertParams)>,
        gate: GatingParams,
        levels: QuantileLevels,
        scaler: FeatureScaler,
    ) -> Result<MoEModel> {
        if experts.is_empty() {
            return Err(Error::EmptyInput("model needs at least one expert".to_string()));
        }
        for w in experts.windows(2) {
            if w[1].0.index() <= w[0].0.index() {
                return Err(Error::ExpertOrderMismatch {
                    detail: format!(
                        "experts must follow canonical chemistry order without repeats, got {} after {}",
                        w[1].0, w[0].0
                    ),
                });
            }
        }
        let input_dim = experts[0].1.input_dim();
        let k = experts[0].1.quantile_count();
        for (chem, e) in &experts {
            if e.input_dim() != input_dim {
                return Err(Error::dim(
                    format!("{chem} expert input width"),
                    input_dim,
                    e.input_dim(),
                ));
            }
            if e.quantile_count() != k {
                return Err(Error::dim(
                    format!("{chem} expert quantile count"),
                    k,
                    e.quantile_count(),
                ));
            }
        }
        if levels.count() != k {
            return Err(Error::dim("model levels", k, levels.count()));
        }
        if gate.expert_count() != experts.len() {
            return Err(Error::dim("gate expert count", experts.len(), gate.expert_count()));
        }
        if gate.input_dim() != input_dim {
            return Err(Error::dim("gate input width", input_dim, gate.input_dim()));
        }
        if scaler.dim() != input_dim {
            return Err(Error::dim("scaler width", input_dim, scaler.dim()));
        }
        Ok(MoEModel {
            experts,
            gate,
            levels,
            scaler,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn experts(&self) -> &[(Chemistry, ExpertParams)] {
        &self.experts
    }

    pub fn gate(&self) -> &GatingParams {
        &self.gate
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].1.input_dim()
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn chemistries(&self) -> Vec<Chemistry> {
        self.experts.iter().map(|(c, _)| *c).collect()
    }

    /// Combined quantile vector for one raw (unscaled) feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<QuantileVector> {
        Ok(self.predict_with_gate(x)?.0)
    }

    /// Combined quantiles plus the gate weights that produced them.
    pub fn predict_with_gate(&self, x: &[f64]) -> Result<(QuantileVector, GateWeights)> {
        let scaled = self.scaler.transform_row(x)?;
        let probs = self.gate.weights_one(&scaled)?;
        let mut combined = vec![0.0; self.levels.count()];
        for ((_, expert), &p) in self.experts.iter().zip(&probs) {
            let out = expert.predict_one(&scaled)?;
            for (c, q) in combined.iter_mut().zip(&out.quantiles) {
                *c += p * q;
            }
        }
        repair_ties(&mut combined);
        let qv = QuantileVector::new(combined, self.levels.clone())?;
        Ok((qv, probs))
    }

    /// Batched prediction: one quantile row and one gate-weight row per
    /// input row. Raw features; scaling happens inside.
    pub fn predict_batch(&self, xs: &Matrix) -> Result<(Matrix, Matrix)> {
        let scaled = self.scaler.transform(xs)?;
        let n = scaled.rows();
        let k = self.levels.count();
        let gate_out = self.gate.forward(&scaled)?;
        let mut combined = Matrix::zeros(n, k);
        for (i, (_, expert)) in self.experts.iter().enumerate() {
            let fwd = expert.forward(&scaled, Mode::Infer)?;
            for r in 0..n {
                let p = gate_out.probs[(r, i)];
                let src = fwd.quantiles.row(r);
                for (c, &q) in combined.row_mut(r).iter_mut().zip(src) {
                    *c += p * q;
                }
            }
        }
        for r in 0..n {
            repair_ties(combined.row_mut(r));
        }
        Ok((combined, gate_out.probs))
    }

    /// Smoothed predictive distribution for one raw feature vector.
    pub fn distribution(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        Ok(PredictiveDistribution::from_quantiles(self.predict(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertInit;
    use crate::gating::GatingInit;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantile_score_fixtures() {
        // Zero residual everywhere scores zero.
        assert_eq!(quantile_score(0.0, &[0.0], &[0.5]), 0.0);
        // K=1, tau=0.5, y=1, q=0: rho_0.5(1) = 0.5.
        assert_relative_eq!(quantile_score(1.0, &[0.0], &[0.5]), 0.5, epsilon = 1e-15);
        // K=2, tau=(0.1, 0.9), y=0, q=(1, -1):
        // rho_0.1(-1) = 0.9, rho_0.9(1) = 0.9, mean 0.9.
        assert_relative_eq!(
            quantile_score(0.0, &[1.0, -1.0], &[0.1, 0.9]),
            0.9,
            epsilon = 1e-15
        );
    }

    #[test]
    fn quantile_score_is_nonnegative_and_zero_only_at_coincidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let k = rng.gen_range(1..8);
            let levels: Vec<f64> = {
                let mut l: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..0.99)).collect();
                l.sort_by(|a, b| a.partial_cmp(b).unwrap());
                l
            };
            let q: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let y = rng.gen_range(-10.0..10.0);
            let qs = quantile_score(y, &q, &levels);
            assert!(qs >= 0.0);
            if q.iter().any(|&v| v != y) {
                assert!(qs > 0.0, "QS must be positive unless every quantile equals y");
            }
        }
    }

    #[test]
    fn batch_score_is_the_mean_of_per_sample_scores() {
        let levels = [0.1, 0.5, 0.9];
        let rows = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.0, 1.0],
            vec![5.0, 6.0, 7.0],
        ])
        .unwrap();
        let ys = [2.5, 0.2, 4.0];
        let batch = quantile_score_batch(&ys, &rows, &levels);
        let mean = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| quantile_score(y, rows.row(i), &levels))
            .sum::<f64>()
            / 3.0;
        assert_eq!(batch, mean);
    }

    #[test]
    fn score_gradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let levels = [0.05, 0.3, 0.5, 0.8, 0.95];
        for _ in 0..50 {
            let y: f64 = rng.gen_range(-5.0..5.0);
            // Keep every quantile at least 1e-3 away from y so the central
            // difference never straddles the kink.
            let q: Vec<f64> = (0..5)
                .map(|_| {
                    let mut v = rng.gen_range(-5.0..5.0);
                    while (v - y).abs() < 1e-3 {
                        v = rng.gen_range(-5.0..5.0);
                    }
                    v
                })
                .collect();
            let mut analytic = vec![0.0; 5];
            quantile_score_grad_into(y, &q, &levels, 1.0, &mut analytic);
            let h = 1e-7;
            for k in 0..5 {
                let mut qp = q.clone();
                qp[k] += h;
                let mut qm = q.clone();
                qm[k] -= h;
                let fd =
                    (quantile_score(y, &qp, &levels) - quantile_score(y, &qm, &levels)) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() < 1e-6,
                    "dq[{k}]: fd {fd} vs analytic {}",
                    analytic[k]
                );
            }
        }
    }

    fn model_fixture(seed: u64, expert_count: usize) -> MoEModel {
        let input_dim = 6;
        let chems: Vec<Chemistry> = Chemistry::ALL[..expert_count].to_vec();
        let experts: Vec<(Chemistry, ExpertParams)> = chems
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let init = ExpertInit::new(input_dim, 8, 5, seed + i as u64);
                (c, ExpertParams::init(&init).unwrap())
            })
            .collect();
        let gate = GatingParams::init(&GatingInit {
            input_dim,
            hidden_dims: [8, 8, 8],
            expert_count,
            negative_slope: 0.01,
            seed,
        })
        .unwrap();
        let levels = QuantileLevels::new(vec![0.05, 0.25, 0.5, 0.75, 0.95]).unwrap();
        MoEModel::new(experts, gate, levels, FeatureScaler::identity(input_dim)).unwrap()
    }

    #[test]
    fn uniform_gate_over_identical_experts_returns_their_vector() {
        // A freshly initialized gate is exactly uniform; give every slot the
        // same expert parameters and the convex combination collapses to
        // that expert's output (to rounding of the p-weighted sum).
        let input_dim = 4;
        let init = ExpertInit::new(input_dim, 8, 3, 99);
        let shared = ExpertParams::init(&init).unwrap();
        let experts: Vec<(Chemistry, ExpertParams)> = Chemistry::ALL
            .iter()
            .map(|&c| (c, shared.clone()))
            .collect();
        let gate = GatingParams::init(&GatingInit {
            input_dim,
            hidden_dims: [6, 6, 6],
            expert_count: 5,
            negative_slope: 0.01,
            seed: 1,
        })
        .unwrap();
        let levels = QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap();
        let model = MoEModel::new(
            experts,
            gate,
            levels,
            FeatureScaler::identity(input_dim),
        )
        .unwrap();

        let x = [0.3, -1.2, 0.8, 2.0];
        let single = shared.predict_one(&x).unwrap();
        let combined = model.predict(&x).unwrap();
        for (&c, &s) in combined.values().iter().zip(&single.quantiles) {
            assert_relative_eq!(c, s, max_relative = 1e-14);
        }
    }

    #[test]
    fn one_hot_gate_reproduces_the_selected_expert_exactly() {
        let mut model = model_fixture(5, 3);
        // Push the final gate layer's bias hard toward expert 1; the softmax
        // saturates and the other experts contribute exactly 0 after the
        // weighted sum (p ~ 1e-40 times finite quantiles still perturbs, so
        // drive it to actual zero with an overwhelming margin).
        let last = model.gate.layers.last_mut().unwrap();
        last.bias[1] = 1e4;
        let x = [0.5, 0.1, -0.3, 0.9, 1.5, -2.0];
        let scaled = x; // identity scaler
        let expected = model.experts[1].1.predict_one(&scaled).unwrap();
        let (combined, probs) = model.predict_with_gate(&x).unwrap();
        assert_eq!(probs[1], 1.0);
        assert_eq!(probs[0], 0.0);
        assert_eq!(combined.values(), expected.quantiles.as_slice());
    }

    #[test]
    fn combined_outputs_strictly_increase_under_parameter_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..100 {
            let mut model = model_fixture(round, 5);
            // Randomize everything through the flat views.
            for (_, e) in &mut model.experts {
                let flat: Vec<f64> = (0..e.param_count()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                e.load_flat(&flat).unwrap();
            }
            let flat: Vec<f64> = (0..model.gate.param_count())
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect();
            model.gate.load_flat(&flat).unwrap();

            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let qv = model.predict(&x).unwrap();
            for w in qv.values().windows(2) {
                assert!(w[1] > w[0], "combined quantiles must strictly increase");
            }
        }
    }

    #[test]
    fn batch_prediction_agrees_with_single_prediction() {
        let model = model_fixture(11, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let xs = Matrix::from_rows(&rows).unwrap();
        let (qs, ps) = model.predict_batch(&xs).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let (qv, gw) = model.predict_with_gate(row).unwrap();
            assert_eq!(qs.row(i), qv.values());
            assert_eq!(ps.row(i), gw.as_slice());
        }
    }

    #[test]
    fn prediction_applies_the_stored_scaler() {
        let base = model_fixture(21, 2);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let unscaled = base.predict(&x).unwrap();

        let scaler = FeatureScaler::from_parts(vec![1.0; 6], vec![2.0; 6]).unwrap();
        let shifted = MoEModel::new(
            base.experts.clone(),
            base.gate.clone(),
            base.levels.clone(),
            scaler,
        )
        .unwrap();
        let scaled_pred = shifted.predict(&x).unwrap();
        assert_ne!(unscaled.values(), scaled_pred.values());

        // Feeding pre-standardized inputs to the identity-scaler model
        // reproduces the scaler model's output on raw inputs.
        let pre: Vec<f64> = x.iter().map(|v| (v - 1.0) / 2.0).collect();
        let manual = base.predict(&pre).unwrap();
        assert_eq!(manual.values(), scaled_pred.values());
    }

    #[test]
    fn model_assembly_validates_shapes_and_order() {
        let ok = model_fixture(1, 3);
        // Wrong chemistry order.
        let mut swapped = ok.experts.clone();
        swapped.swap(0, 1);
        assert!(matches!(
            MoEModel::new(
                swapped,
                ok.gate.clone(),
                ok.levels.clone(),
                ok.scaler.clone()
            ),
            Err(Error::ExpertOrderMismatch { .. })
        ));
        // Duplicate chemistry.
        let mut dup = ok.experts.clone();
        dup[1].0 = dup[0].0;
        assert!(MoEModel::new(dup, ok.gate.clone(), ok.levels.clone(), ok.scaler.clone()).is_err());
        // Gate expert-count mismatch.
        let narrow_gate = GatingParams::init(&GatingInit {
            input_dim: 6,
            hidden_dims: [8, 8, 8],
            expert_count: 2,
            negative_slope: 0.01,
            seed: 0,
        })
        .unwrap();
        assert!(MoEModel::new(
            ok.experts.clone(),
            narrow_gate,
            ok.levels.clone(),
            ok.scaler.clone()
        )
        .is_err());
        // Level-count mismatch.
        let wrong_levels = QuantileLevels::new(vec![0.25, 0.75]).unwrap();
        assert!(MoEModel::new(
            ok.experts.clone(),
            ok.gate.clone(),
            wrong_levels,
            ok.scaler.clone()
        )
        .is_err());
        // Scaler width mismatch.
        assert!(MoEModel::new(
            ok.experts.clone(),
            ok.gate.clone(),
            ok.levels.clone(),
            FeatureScaler::identity(7)
        )
        .is_err());
        // Empty expert list.
        assert!(MoEModel::new(
            vec![],
            ok.gate.clone(),
            ok.levels.clone(),
            ok.scaler.clone()
        )
        .is_err());
    }
}
