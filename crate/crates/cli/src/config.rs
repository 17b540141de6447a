//! Flat `key=value` run configuration.
//!
//! One assignment per line; blank lines and lines whose first non-space
//! character is `#` are comments. Keys mirror the training configuration
//! plus a handful of pipeline settings (data path, curve cycle, quantile
//! levels, bandwidth override, output directory). Unknown keys are rejected
//! outright so a typo can never silently fall back to a default.

use std::path::PathBuf;
use std::str::FromStr;

use qmoe::{QuantileLevels, TrainConfig, DEFAULT_CURVE_CYCLE};

use crate::{CliError, CliResult};

/// Everything a command can pick up from `--config`.
#[derive(Debug, Clone)]
pub(crate) struct RunConfig {
    pub train: TrainConfig,
    /// Which measured discharge curve feeds the feature vector.
    pub curve_cycle: u32,
    /// Smoothing bandwidth override for `survival` and `plotdata`; the
    /// automatic rule applies when unset.
    pub bandwidth: Option<f64>,
    /// Default training/evaluation data path when the flag is omitted.
    pub data: Option<PathBuf>,
    /// Default output directory for `train` when the flag is omitted.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            curve_cycle: DEFAULT_CURVE_CYCLE,
            bandwidth: None,
            data: None,
            out_dir: None,
        }
    }
}

fn parse_value<T: FromStr>(origin: &str, line_no: usize, key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| {
        CliError::validation(format!(
            "{origin} line {line_no}: invalid value for `{key}`: {value:?}"
        ))
    })
}

fn parse_list<T: FromStr>(origin: &str, line_no: usize, key: &str, value: &str) -> CliResult<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_value(origin, line_no, key, part.trim()))
        .collect()
}

/// Parse config text; `origin` names the file in error messages.
pub(crate) fn parse_run_config(text: &str, origin: &str) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::validation(format!(
                "{origin} line {line_no}: expected key=value, got {line:?}"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "learning_rate" => cfg.train.learning_rate = parse_value(origin, line_no, key, value)?,
            "stage2_learning_rate" => {
                cfg.train.stage2_learning_rate = parse_value(origin, line_no, key, value)?;
            }
            "gate_learning_rate" => {
                cfg.train.gate_learning_rate = Some(parse_value(origin, line_no, key, value)?);
            }
            "batch_size" => cfg.train.batch_size = parse_value(origin, line_no, key, value)?,
            "hidden_dim" => cfg.train.hidden_dim = parse_value(origin, line_no, key, value)?,
            "gate_hidden_dims" => {
                let dims: Vec<usize> = parse_list(origin, line_no, key, value)?;
                cfg.train.gate_hidden_dims = dims.try_into().map_err(|_| {
                    CliError::validation(format!(
                        "{origin} line {line_no}: `gate_hidden_dims` needs exactly 3 \
                         comma-separated sizes"
                    ))
                })?;
            }
            "max_epochs" => cfg.train.max_epochs = parse_value(origin, line_no, key, value)?,
            "patience" => cfg.train.patience = parse_value(origin, line_no, key, value)?,
            "split_ratio" => cfg.train.split_ratio = parse_value(origin, line_no, key, value)?,
            "validation_fraction" => {
                cfg.train.validation_fraction = Some(parse_value(origin, line_no, key, value)?);
            }
            "dropout_rate" => cfg.train.dropout_rate = parse_value(origin, line_no, key, value)?,
            "seed" => cfg.train.seed = parse_value(origin, line_no, key, value)?,
            "levels" => {
                let taus: Vec<f64> = parse_list(origin, line_no, key, value)?;
                cfg.train.levels = QuantileLevels::new(taus).map_err(|e| {
                    CliError::validation(format!("{origin} line {line_no}: {e}"))
                })?;
            }
            "curve_cycle" => cfg.curve_cycle = parse_value(origin, line_no, key, value)?,
            "bandwidth" => cfg.bandwidth = Some(parse_value(origin, line_no, key, value)?),
            "data" => cfg.data = Some(PathBuf::from(value)),
            "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
            other => {
                return Err(CliError::validation(format!(
                    "{origin} line {line_no}: unknown key `{other}`"
                )));
            }
        }
    }
    Ok(cfg)
}
