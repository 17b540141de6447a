//! Point-prediction metrics and interval calibration.
//!
//! MAPE needs a policy for zero labels — dividing by zero silently is the
//! one wrong answer — so samples with `|y| = 0` are excluded from the MAPE
//! average and the exclusion count is carried in the result. R² uses the
//! evaluated set's own label mean for the total sum of squares and is
//! undefined (reported as `None`, rendered "NA" downstream) when all labels
//! are equal.

use crate::dist::PredictionInterval;
use crate::error::{Error, Result};

/// Point metrics over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean absolute error, in label units (cycles).
    pub mae: f64,
    /// Mean absolute percentage error over samples with nonzero labels;
    /// `None` if every label was zero.
    pub mape: Option<f64>,
    /// How many samples MAPE skipped because their label was zero.
    pub mape_excluded: usize,
    /// Root mean squared error, in label units (cycles).
    pub rmse: f64,
    /// Coefficient of determination; `None` when all labels are equal.
    pub r2: Option<f64>,
    /// Number of samples evaluated.
    pub count: usize,
}

/// MAE / MAPE / RMSE / R² over paired actuals and predictions.
pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.len() != yhat.len() {
        return Err(Error::dim("metric inputs", y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("compute_metrics".to_string()));
    }
    let n = y.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_count = 0usize;
    for (&a, &p) in y.iter().zip(yhat) {
        let err = a - p;
        abs_sum += err.abs();
        sq_sum += err * err;
        if a != 0.0 {
            pct_sum += (err / a).abs();
            pct_count += 1;
        }
    }
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|&a| (a - mean_y) * (a - mean_y)).sum();
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - sq_sum / ss_tot)
    } else {
        None
    };
    Ok(Metrics {
        mae: abs_sum / n,
        mape: if pct_count > 0 {
            Some(100.0 * pct_sum / pct_count as f64)
        } else {
            None
        },
        mape_excluded: y.len() - pct_count,
        rmse: (sq_sum / n).sqrt(),
        r2,
        count: y.len(),
    })
}

/// Fraction of actuals falling inside their prediction interval.
pub fn interval_coverage(y: &[f64], intervals: &[PredictionInterval]) -> Result<f64> {
    if y.len() != intervals.len() {
        return Err(Error::dim("coverage inputs", y.len(), intervals.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("interval_coverage".to_string()));
    }
    let hits = y
        .iter()
        .zip(intervals)
        .filter(|(&a, pi)| pi.lower <= a && a <= pi.upper)
        .count();
    Ok(hits as f64 / y.len() as f64)
}
