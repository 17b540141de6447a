//! Synthetic multi-chemistry datasets with a closed-form label law.
//!
//! Each cell draws a latent health scalar `s ~ U(0, 1)`. The label is
//!
//! ```text
//! RUL = rul_offset + rul_scale * s + Normal(0, noise_std)
//! ```
//!
//! and the discharge curve encodes `s` in its shape:
//!
//! ```text
//! V(q) = v_max - (v_max - v_min) * (q / C)^p(s),   p(s) = base + span * s
//! ```
//!
//! which is strictly decreasing in capacity for any positive exponent, hits
//! `v_max` at zero capacity and `v_min` at nominal capacity, and bows more
//! the smaller the exponent. A model can therefore recover `s` — and hence
//! the conditional label distribution — from the curve alone, and the
//! generator can state that distribution in closed form:
//! `Q(tau | s) = rul_offset + rul_scale * s + noise_std * z_tau`.
//!
//! Labels are clamped at zero as a guard; profiles should keep
//! `rul_offset` several noise standard deviations above zero so the clamp
//! never fires and the closed-form law stays exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{capacity_grid, CellRecord, Chemistry, DischargeCurve};
use crate::dist::{normal_cdf, normal_pdf, normal_quantile};
use crate::error::{Error, Result};
use crate::seeds;

fn default_seed() -> u64 {
    42
}

fn default_exponent_base() -> f64 {
    0.75
}

fn default_exponent_span() -> f64 {
    0.5
}

fn default_points_per_curve() -> usize {
    25
}

fn default_curve_cycle() -> u32 {
    100
}

/// Generation parameters for one chemistry's population of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemistryProfile {
    pub chemistry: Chemistry,
    pub count: usize,
    pub nominal_capacity_ah: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub charge_c_rate: f64,
    pub discharge_c_rate: f64,
    /// Label in cycles at zero health.
    pub rul_offset: f64,
    /// Label cycles gained per unit health.
    pub rul_scale: f64,
    /// Standard deviation of the additive label noise, in cycles.
    pub noise_std: f64,
    /// Curve exponent at zero health.
    #[serde(default = "default_exponent_base")]
    pub curve_exponent_base: f64,
    /// Curve exponent gained per unit health.
    #[serde(default = "default_exponent_span")]
    pub curve_exponent_span: f64,
    /// Measured points per generated curve (endpoints included).
    #[serde(default = "default_points_per_curve")]
    pub points_per_curve: usize,
    /// Cycle count stamped on the generated curve.
    #[serde(default = "default_curve_cycle")]
    pub curve_cycle: u32,
}

/// Full dataset request: a seed plus one profile per chemistry population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub profiles: Vec<ChemistryProfile>,
}

impl ChemistryProfile {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("count", "must be > 0"));
        }
        for (name, v) in [
            ("nominal_capacity_ah", self.nominal_capacity_ah),
            ("charge_c_rate", self.charge_c_rate),
            ("discharge_c_rate", self.discharge_c_rate),
            ("rul_scale", self.rul_scale),
            ("curve_exponent_base", self.curve_exponent_base),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !self.v_min.is_finite() || !self.v_max.is_finite() || self.v_min >= self.v_max {
            return Err(Error::invalid(
                "v_min/v_max",
                format!("need v_min < v_max, got {} / {}", self.v_min, self.v_max),
            ));
        }
        if !(self.rul_offset >= 0.0) || !self.rul_offset.is_finite() {
            return Err(Error::invalid(
                "rul_offset",
                format!("must be >= 0, got {}", self.rul_offset),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid(
                "noise_std",
                format!("must be >= 0, got {}", self.noise_std),
            ));
        }
        if !(self.curve_exponent_span >= 0.0) || !self.curve_exponent_span.is_finite() {
            return Err(Error::invalid(
                "curve_exponent_span",
                format!("must be >= 0, got {}", self.curve_exponent_span),
            ));
        }
        if self.points_per_curve < 2 {
            return Err(Error::invalid(
                "points_per_curve",
                format!("need at least 2, got {}", self.points_per_curve),
            ));
        }
        Ok(())
    }

    /// Curve exponent for a given health.
    pub fn exponent_for_health(&self, s: f64) -> f64 {
        self.curve_exponent_base + self.curve_exponent_span * s
    }

    /// Conditional label mean given health: `rul_offset + rul_scale * s`.
    pub fn mean_rul(&self, s: f64) -> f64 {
        self.rul_offset + self.rul_scale * s
    }

    /// Closed-form conditional label quantile given health.
    pub fn conditional_quantile(&self, s: f64, tau: f64) -> Result<f64> {
        Ok(self.mean_rul(s) + self.noise_std * normal_quantile(tau)?)
    }

    /// Closed-form unconditional label cdf `P(RUL <= y)` under the
    /// generating law (ignoring the zero clamp, which well-sized profiles
    /// never hit): integrating the Gaussian cdf over uniform health gives
    /// `(sigma / scale) * (G(b) - G(a))` with `G(t) = t * Phi(t) + phi(t)`,
    /// `a = (y - offset - scale) / sigma`, `b = (y - offset) / sigma`.
    pub fn label_cdf(&self, y: f64) -> f64 {
        if self.noise_std == 0.0 {
            // Pure uniform: linear ramp over [offset, offset + scale].
            return ((y - self.rul_offset) / self.rul_scale).clamp(0.0, 1.0);
        }
        let g = |t: f64| t * normal_cdf(t) + normal_pdf(t);
        let a = (y - self.rul_offset - self.rul_scale) / self.noise_std;
        let b = (y - self.rul_offset) / self.noise_std;
        ((self.noise_std / self.rul_scale) * (g(b) - g(a))).clamp(0.0, 1.0)
    }

    /// Closed-form unconditional label quantile, by bisection on
    /// [`Self::label_cdf`] (the cdf is strictly increasing on the support).
    pub fn label_quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid("tau", format!("must be in (0, 1), got {tau}")));
        }
        let pad = 10.0 * self.noise_std + 1.0;
        let mut lo = self.rul_offset - pad;
        let mut hi = self.rul_offset + self.rul_scale + pad;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.label_cdf(mid) < tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// The record for one cell at a known health, labeled by `rul` (already
    /// noise-perturbed by the caller).
    fn build_cell(&self, cell_id: String, s: f64, rul: f64) -> CellRecord {
        let p = self.exponent_for_health(s);
        let delta = self.v_max - self.v_min;
        let c = self.nominal_capacity_ah;
        let points = capacity_grid(c, self.points_per_curve)
            .into_iter()
            .map(|q| [q, self.v_max - delta * (q / c).powf(p)])
            .collect();
        CellRecord {
            cell_id,
            chemistry: self.chemistry,
            nominal_capacity_ah: c,
            v_min: self.v_min,
            v_max: self.v_max,
            charge_c_rate: self.charge_c_rate,
            discharge_c_rate: self.discharge_c_rate,
            rul_cycles: rul.max(0.0),
            curves: vec![DischargeCurve {
                cycle: self.curve_cycle,
                points,
            }],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::EmptyInput("synthetic spec has no profiles".to_string()));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        Ok(())
    }

    /// A ready-to-run five-chemistry demo spec with distinct label scales
    /// and cell specs per chemistry.
    pub fn demo() -> SynthSpec {
        let base = |chemistry, capacity, v_min, v_max, offset, scale| ChemistryProfile {
            chemistry,
            count: 200,
            nominal_capacity_ah: capacity,
            v_min,
            v_max,
            charge_c_rate: 1.0,
            discharge_c_rate: 2.0,
            rul_offset: offset,
            rul_scale: scale,
            noise_std: 25.0,
            curve_exponent_base: default_exponent_base(),
            curve_exponent_span: default_exponent_span(),
            points_per_curve: default_points_per_curve(),
            curve_cycle: default_curve_cycle(),
        };
        SynthSpec {
            seed: default_seed(),
            profiles: vec![
                base(Chemistry::Lfp, 1.1, 2.0, 3.6, 400.0, 1200.0),
                base(Chemistry::Nca, 3.2, 2.5, 4.2, 300.0, 900.0),
                base(Chemistry::Nmc, 2.8, 2.7, 4.2, 350.0, 1000.0),
                base(Chemistry::Lco, 2.0, 3.0, 4.35, 250.0, 700.0),
                base(Chemistry::NmcLco, 2.4, 3.0, 4.3, 300.0, 800.0),
            ],
        }
    }
}

/// Generate every profile's cells, deterministically from `spec.seed`.
/// Records come out grouped by profile in spec order, cells in draw order,
/// with ids like `LFP-00017`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<CellRecord>> {
    spec.validate()?;
    let total: usize = spec.profiles.iter().map(|p| p.count).sum();
    let mut records = Vec::with_capacity(total);
    for (pi, profile) in spec.profiles.iter().enumerate() {
        let mut rng = seeds::rng(spec.seed, seeds::stream::SYNTH, pi as u64);
        for i in 0..profile.count {
            let s: f64 = rng.gen();
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let rul = profile.mean_rul(s) + profile.noise_std * z;
            let id = format!("{}-{:05}", profile.chemistry, i);
            records.push(profile.build_cell(id, s, rul));
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_profile(chemistry: Chemistry, count: usize) -> ChemistryProfile {
        ChemistryProfile {
            chemistry,
            count,
            nominal_capacity_ah: 1.1,
            v_min: 2.0,
            v_max: 3.6,
            charge_c_rate: 1.0,
            discharge_c_rate: 4.0,
            rul_offset: 500.0,
            rul_scale: 1000.0,
            noise_std: 25.0,
            curve_exponent_base: 0.75,
            curve_exponent_span: 0.5,
            points_per_curve: 25,
            curve_cycle: 100,
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized_per_profile() {
        let spec = SynthSpec {
            seed: 7,
            profiles: vec![
                tiny_profile(Chemistry::Lfp, 1000),
                tiny_profile(Chemistry::Nca, 1000),
                tiny_profile(Chemistry::Nmc, 1000),
            ],
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.len(), 3000);
        assert_eq!(a, b);
        // Byte-for-byte identical once serialized, too.
        let line_a = serde_json::to_string(&a[1234]).unwrap();
        let line_b = serde_json::to_string(&b[1234]).unwrap();
        assert_eq!(line_a, line_b);
        // Different seeds move the draws.
        let spec2 = SynthSpec { seed: 8, ..spec };
        let c = synth_generate(&spec2).unwrap();
        assert_ne!(a[0].rul_cycles, c[0].rul_cycles);
    }

    #[test]
    fn generated_records_pass_validation_and_curves_strictly_decrease() {
        let spec = SynthSpec {
            seed: 3,
            profiles: vec![tiny_profile(Chemistry::Lco, 200)],
        };
        for record in synth_generate(&spec).unwrap() {
            record.validate().unwrap();
            let curve = &record.curves[0];
            assert_eq!(curve.points.len(), 25);
            assert_eq!(curve.points[0][1], record.v_max);
            assert_relative_eq!(curve.points[24][1], record.v_min, epsilon = 1e-12);
            for w in curve.points.windows(2) {
                assert!(
                    w[1][1] < w[0][1],
                    "voltage must strictly decrease: {} then {}",
                    w[0][1],
                    w[1][1]
                );
            }
        }
    }

    #[test]
    fn noise_free_labels_match_the_health_recovered_from_curve_shape() {
        // With sigma = 0 the label is exactly offset + scale * s, and s can
        // be recovered from any interior curve point by inverting
        // V(q) = v_max - dv * (q/C)^p for p, then s = (p - base) / span.
        let mut profile = tiny_profile(Chemistry::Lfp, 300);
        profile.noise_std = 0.0;
        let spec = SynthSpec {
            seed: 11,
            profiles: vec![profile.clone()],
        };
        for record in synth_generate(&spec).unwrap() {
            let mid = record.curves[0].points[12];
            let frac = mid[0] / profile.nominal_capacity_ah;
            let drop = (profile.v_max - mid[1]) / (profile.v_max - profile.v_min);
            let p = drop.ln() / frac.ln();
            let s = (p - profile.curve_exponent_base) / profile.curve_exponent_span;
            assert!((0.0..=1.0).contains(&s));
            assert_relative_eq!(record.rul_cycles, profile.mean_rul(s), epsilon = 1e-6);
        }
    }

    #[test]
    fn empirical_label_quantiles_converge_to_the_closed_form_law() {
        // 100k draws against the analytic unconditional quantile function.
        let mut profile = tiny_profile(Chemistry::Nmc, 100_000);
        profile.points_per_curve = 2;
        let spec = SynthSpec {
            seed: 5,
            profiles: vec![profile.clone()],
        };
        let mut labels: Vec<f64> = synth_generate(&spec)
            .unwrap()
            .iter()
            .map(|r| r.rul_cycles)
            .collect();
        labels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let idx = ((labels.len() as f64) * tau) as usize;
            let empirical = labels[idx];
            let analytic = profile.label_quantile(tau).unwrap();
            let rel = (empirical - analytic).abs() / analytic.abs();
            assert!(
                rel < 0.02,
                "tau {tau}: empirical {empirical} vs analytic {analytic} (rel {rel})"
            );
        }
    }

    #[test]
    fn label_cdf_matches_its_own_quantile_inverse_and_brackets() {
        let profile = tiny_profile(Chemistry::Nca, 1);
        // The Gaussian noise term has unbounded support, so the cdf is
        // never exactly 0 below the ramp, just astronomically small; far
        // above it rounds to exactly 1.
        assert!(profile.label_cdf(0.0) < 1e-60);
        assert_eq!(profile.label_cdf(1e6), 1.0);
        // Median of the symmetric-uniform mixture is offset + scale/2.
        let med = profile.label_quantile(0.5).unwrap();
        assert_relative_eq!(med, 1000.0, epsilon = 1e-6);
        for tau in [0.05, 0.3, 0.5, 0.7, 0.95] {
            let q = profile.label_quantile(tau).unwrap();
            assert_relative_eq!(profile.label_cdf(q), tau, epsilon = 1e-9);
        }
    }

    #[test]
    fn conditional_quantiles_follow_the_gaussian_law() {
        let profile = tiny_profile(Chemistry::Lfp, 1);
        let med = profile.conditional_quantile(0.4, 0.5).unwrap();
        assert_relative_eq!(med, profile.mean_rul(0.4), epsilon = 1e-12);
        // 90% band width = 2 * z_{0.95} * sigma.
        let lo = profile.conditional_quantile(0.4, 0.05).unwrap();
        let hi = profile.conditional_quantile(0.4, 0.95).unwrap();
        assert_relative_eq!(hi - lo, 2.0 * 1.644853626951472714864 * 25.0, epsilon = 1e-9);
    }

    #[test]
    fn spec_json_round_trips_with_defaults() {
        let json = r#"{
            "profiles": [{
                "chemistry": "LFP", "count": 10,
                "nominal_capacity_ah": 1.1, "v_min": 2.0, "v_max": 3.6,
                "charge_c_rate": 1.0, "discharge_c_rate": 4.0,
                "rul_offset": 500.0, "rul_scale": 1000.0, "noise_std": 25.0
            }]
        }"#;
        let spec: SynthSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.profiles[0].curve_exponent_base, 0.75);
        assert_eq!(spec.profiles[0].points_per_curve, 25);
        let again: SynthSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        // Unknown keys are rejected.
        let bad = json.replace(r#""count": 10,"#, r#""count": 10, "typo_key": 1,"#);
        assert!(serde_json::from_str::<SynthSpec>(&bad).is_err());
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = tiny_profile(Chemistry::Lfp, 0);
        assert!(p.validate().is_err());
        p.count = 5;
        p.rul_scale = 0.0;
        assert!(p.validate().is_err());
        p.rul_scale = 100.0;
        p.noise_std = -1.0;
        assert!(p.validate().is_err());
        p.noise_std = 0.0;
        p.points_per_curve = 1;
        assert!(p.validate().is_err());
        p.points_per_curve = 2;
        p.v_min = 5.0;
        assert!(p.validate().is_err());
        let empty = SynthSpec {
            seed: 1,
            profiles: vec![],
        };
        assert!(empty.validate().is_err());
        assert!(synth_generate(&empty).is_err());
    }

    #[test]
    fn demo_spec_is_valid_and_covers_all_chemistries() {
        let spec = SynthSpec::demo();
        spec.validate().unwrap();
        let mut chems: Vec<Chemistry> = spec.profiles.iter().map(|p| p.chemistry).collect();
        chems.sort();
        chems.dedup();
        assert_eq!(chems.len(), 5);
    }
}
