//! Cell records, feature engineering, and dataset plumbing.
//!
//! A cell is described by its cathode chemistry, a handful of scalar specs,
//! a discharge voltage-capacity curve, and a remaining-useful-life label in
//! cycles. The feature builder turns one record into a fixed 1010-entry
//! vector:
//!
//! ```text
//! [ one_hot(5) | nominal_capacity | v_min | v_max | charge_c | discharge_c
//!   | voltage at 1000 evenly spaced capacities from 0 to nominal capacity ]
//! ```
//!
//! The curve is resampled by piecewise-linear interpolation on the capacity
//! axis, clamping to the nearest measured voltage outside the measured
//! range (discharge voltages are physically bounded, so clamping beats
//! linear extension). Records travel as line-delimited JSON; parsing runs in
//! strict mode (first bad line aborts with its line number) or lenient mode
//! (bad lines are skipped and reported).
//!
//! The [`synth`] submodule generates multi-chemistry synthetic datasets from
//! a parametric law with closed-form conditional quantiles, which is what
//! the end-to-end training tests check recovery against.

pub mod synth;

pub use synth::{synth_generate, ChemistryProfile, SynthSpec};

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds;

/// Cathode chemistries, in the fixed one-hot order used everywhere:
/// LFP, NCA, NMC, LCO, NMC_LCO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Chemistry {
    Lfp,
    Nca,
    Nmc,
    Lco,
    NmcLco,
}

impl Chemistry {
    /// Every chemistry, in canonical (one-hot and model-file) order.
    pub const ALL: [Chemistry; 5] = [
        Chemistry::Lfp,
        Chemistry::Nca,
        Chemistry::Nmc,
        Chemistry::Lco,
        Chemistry::NmcLco,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Chemistry::Lfp => "LFP",
            Chemistry::Nca => "NCA",
            Chemistry::Nmc => "NMC",
            Chemistry::Lco => "LCO",
            Chemistry::NmcLco => "NMC_LCO",
        }
    }

    /// Position in [`Chemistry::ALL`]; also the hot index in the one-hot
    /// block and the stable on-disk code.
    pub fn index(self) -> usize {
        match self {
            Chemistry::Lfp => 0,
            Chemistry::Nca => 1,
            Chemistry::Nmc => 2,
            Chemistry::Lco => 3,
            Chemistry::NmcLco => 4,
        }
    }

    pub fn code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_code(code: u8) -> Result<Chemistry> {
        Chemistry::ALL
            .get(code as usize)
            .copied()
            .ok_or(Error::UnsupportedChemistry {
                found: format!("code {code}"),
            })
    }

    pub fn from_name(name: &str) -> Result<Chemistry> {
        match name {
            "LFP" => Ok(Chemistry::Lfp),
            "NCA" => Ok(Chemistry::Nca),
            "NMC" => Ok(Chemistry::Nmc),
            "LCO" => Ok(Chemistry::Lco),
            // Both spellings appear in the wild for the blended cathode.
            "NMC_LCO" | "NMC-LCO" => Ok(Chemistry::NmcLco),
            other => Err(Error::UnsupportedChemistry {
                found: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Chemistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Chemistry {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Chemistry::from_name(&s).map_err(|e| e.to_string())
    }
}

impl From<Chemistry> for String {
    fn from(c: Chemistry) -> String {
        c.name().to_string()
    }
}

/// One discharge curve: ordered (capacity Ah, voltage V) pairs measured at a
/// given cycle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DischargeCurve {
    pub cycle: u32,
    /// `[capacity_ah, voltage_v]` pairs with strictly increasing capacity.
    pub points: Vec<[f64; 2]>,
}

/// One battery cell: specs, discharge curves, and the RUL label in cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub cell_id: String,
    pub chemistry: Chemistry,
    pub nominal_capacity_ah: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub charge_c_rate: f64,
    pub discharge_c_rate: f64,
    pub rul_cycles: f64,
    pub curves: Vec<DischargeCurve>,
}

fn require_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {v}")))
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    require_finite(name, v)?;
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be > 0, got {v}")))
    }
}

impl CellRecord {
    /// Check every structural invariant; parsing calls this on each line.
    pub fn validate(&self) -> Result<()> {
        if self.cell_id.is_empty() {
            return Err(Error::invalid("cell_id", "must be non-empty"));
        }
        require_positive("nominal_capacity_ah", self.nominal_capacity_ah)?;
        require_finite("v_min", self.v_min)?;
        require_finite("v_max", self.v_max)?;
        if self.v_min >= self.v_max {
            return Err(Error::invalid(
                "v_min/v_max",
                format!("need v_min < v_max, got {} >= {}", self.v_min, self.v_max),
            ));
        }
        require_positive("charge_c_rate", self.charge_c_rate)?;
        require_positive("discharge_c_rate", self.discharge_c_rate)?;
        require_finite("rul_cycles", self.rul_cycles)?;
        if self.rul_cycles < 0.0 {
            return Err(Error::invalid(
                "rul_cycles",
                format!("must be >= 0, got {}", self.rul_cycles),
            ));
        }
        if self.curves.is_empty() {
            return Err(Error::invalid("curves", "need at least one curve"));
        }
        for (ci, curve) in self.curves.iter().enumerate() {
            if curve.points.len() < 2 {
                return Err(Error::invalid(
                    "curve points",
                    format!(
                        "curve {} (cycle {}) has {} points, need at least 2",
                        ci,
                        curve.cycle,
                        curve.points.len()
                    ),
                ));
            }
            for (pi, p) in curve.points.iter().enumerate() {
                require_finite("curve capacity", p[0])?;
                require_finite("curve voltage", p[1])?;
                if p[0] < 0.0 {
                    return Err(Error::invalid(
                        "curve capacity",
                        format!("must be >= 0, got {} (curve {ci}, point {pi})", p[0]),
                    ));
                }
                if pi > 0 && p[0] <= curve.points[pi - 1][0] {
                    return Err(Error::invalid(
                        "curve capacity",
                        format!(
                            "must be strictly increasing, got {} after {} (curve {ci}, point {pi})",
                            p[0],
                            curve.points[pi - 1][0]
                        ),
                    ));
                }
            }
            if self.curves[..ci].iter().any(|c| c.cycle == curve.cycle) {
                return Err(Error::invalid(
                    "curves",
                    format!("duplicate curve at cycle {}", curve.cycle),
                ));
            }
        }
        Ok(())
    }

    /// The curve measured at `cycle`, or an error naming the cycles present.
    pub fn curve_at(&self, cycle: u32) -> Result<&DischargeCurve> {
        self.curves
            .iter()
            .find(|c| c.cycle == cycle)
            .ok_or_else(|| Error::MissingCurve {
                cycle,
                available: self.curves.iter().map(|c| c.cycle).collect(),
            })
    }
}

/// How [`parse_cells`] treats bad lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// First malformed or invalid line aborts parsing with its line number.
    Strict,
    /// Malformed lines are skipped; each skip is reported with its line
    /// number in [`ParseOutcome::warnings`].
    Lenient,
}

/// Parsed records plus any lenient-mode skip reports.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<CellRecord>,
    pub warnings: Vec<String>,
}

/// Parse line-delimited JSON cell records from any buffered reader. Blank
/// lines are ignored; line numbers in errors and warnings are 1-based.
pub fn parse_cells_from<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<CellRecord, _> = serde_json::from_str(&line);
        let reason = match parsed {
            Ok(record) => match record.validate() {
                Ok(()) => {
                    out.records.push(record);
                    continue;
                }
                Err(e) => e.to_string(),
            },
            Err(e) => e.to_string(),
        };
        match mode {
            ParseMode::Strict => {
                return Err(Error::Parse {
                    line: line_no,
                    reason,
                })
            }
            ParseMode::Lenient => out
                .warnings
                .push(format!("line {line_no}: skipped record: {reason}")),
        }
    }
    Ok(out)
}

/// Parse a cell file from disk; see [`parse_cells_from`].
pub fn parse_cells(path: &Path, mode: ParseMode) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path)?;
    parse_cells_from(std::io::BufReader::new(file), mode)
}

/// Number of resampled voltage points in a feature vector.
pub const VOLTAGE_GRID_POINTS: usize = 1000;

/// One-hot block plus five scalar specs plus the resampled curve.
pub const FEATURE_DIM: usize = 5 + 5 + VOLTAGE_GRID_POINTS;

/// Which discharge curve feeds the voltage block unless configured
/// otherwise: the cycle-100 measurement.
pub const DEFAULT_CURVE_CYCLE: u32 = 100;

/// A built feature vector of length [`FEATURE_DIM`].
pub type FeatureVector = Vec<f64>;

/// `n` evenly spaced capacities from 0 to `nominal_capacity` inclusive.
pub fn capacity_grid(nominal_capacity: f64, n: usize) -> Vec<f64> {
    let last = n - 1;
    (0..n)
        .map(|i| {
            if i == last {
                // Land exactly on the nominal capacity instead of within
                // rounding of it.
                nominal_capacity
            } else {
                i as f64 * nominal_capacity / last as f64
            }
        })
        .collect()
}

/// Resample a measured curve onto a capacity grid by piecewise-linear
/// interpolation, clamping to the first/last measured voltage outside the
/// measured capacity range. Needs at least two points.
pub fn interpolate_curve(points: &[[f64; 2]], grid: &[f64]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::invalid(
            "curve points",
            format!("interpolation needs at least 2 points, got {}", points.len()),
        ));
    }
    for (i, p) in points.iter().enumerate() {
        if i > 0 && p[0] <= points[i - 1][0] {
            return Err(Error::invalid(
                "curve points",
                format!(
                    "capacities must be strictly increasing, got {} after {}",
                    p[0],
                    points[i - 1][0]
                ),
            ));
        }
    }
    let first = points[0];
    let last = points[points.len() - 1];
    let out = grid
        .iter()
        .map(|&q| {
            if q <= first[0] {
                return first[1];
            }
            if q >= last[0] {
                return last[1];
            }
            let j = points.partition_point(|p| p[0] < q);
            // points[j-1][0] < q <= points[j][0]
            let (q0, v0) = (points[j - 1][0], points[j - 1][1]);
            let (q1, v1) = (points[j][0], points[j][1]);
            v0 + (q - q0) / (q1 - q0) * (v1 - v0)
        })
        .collect();
    Ok(out)
}

/// Build the 1010-entry feature vector from a record's curve at
/// `curve_cycle` (see the module docs for the layout).
pub fn build_features(record: &CellRecord, curve_cycle: u32) -> Result<FeatureVector> {
    let curve = record.curve_at(curve_cycle)?;
    let grid = capacity_grid(record.nominal_capacity_ah, VOLTAGE_GRID_POINTS);
    let voltages = interpolate_curve(&curve.points, &grid)?;

    let mut x = Vec::with_capacity(FEATURE_DIM);
    let mut one_hot = [0.0; 5];
    one_hot[record.chemistry.index()] = 1.0;
    x.extend_from_slice(&one_hot);
    x.push(record.nominal_capacity_ah);
    x.push(record.v_min);
    x.push(record.v_max);
    x.push(record.charge_c_rate);
    x.push(record.discharge_c_rate);
    x.extend_from_slice(&voltages);
    debug_assert_eq!(x.len(), FEATURE_DIM);
    Ok(x)
}

/// Per-feature z-scoring fit on the training split and stored with the
/// model, so every expert sees identically scaled inputs at train and
/// predict time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Features whose population std falls below this are treated as constant
/// and passed through unscaled (std 1), e.g. one-hot slots of an absent
/// chemistry.
const SCALER_STD_FLOOR: f64 = 1e-12;

impl FeatureScaler {
    /// A pass-through scaler (mean 0, std 1) for pre-scaled or synthetic
    /// feature spaces.
    pub fn identity(dim: usize) -> FeatureScaler {
        FeatureScaler {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit mean and population std per column.
    pub fn fit(features: &Matrix) -> Result<FeatureScaler> {
        if features.rows() == 0 {
            return Err(Error::EmptyInput("FeatureScaler::fit".to_string()));
        }
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                let c = x - m;
                *v += c * c;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n as f64).sqrt();
                if s < SCALER_STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    /// Reassemble from stored statistics (model loading).
    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<FeatureScaler> {
        if mean.len() != std.len() {
            return Err(Error::dim("scaler mean/std", mean.len(), std.len()));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("scaler std", "entries must be positive and finite"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("scaler mean", "entries must be finite"));
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("scaler input", self.dim(), x.len()));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect())
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return Err(Error::dim("scaler input", self.dim(), features.cols()));
        }
        let mut out = features.clone();
        for row in 0..out.rows() {
            for (j, v) in out.row_mut(row).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Deterministic index split: shuffle `0..n` with the seed's split stream,
/// take `floor(ratio * n)` for training, the rest for test.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "split ratio",
            format!("must be in (0, 1), got {ratio}"),
        ));
    }
    if n < 2 {
        return Err(Error::invalid(
            "split size",
            format!("need at least 2 records to split, got {n}"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng(seed, seeds::stream::SPLIT, 0);
    idx.shuffle(&mut rng);
    let train_len = (ratio * n as f64).floor() as usize;
    let test = idx.split_off(train_len);
    Ok((idx, test))
}

/// Deterministic train/test partition of whole records.
pub fn split_records(
    records: &[CellRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<CellRecord>, Vec<CellRecord>)> {
    let (train_idx, test_idx) = split_indices(records.len(), ratio, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&train_idx), pick(&test_idx)))
}
