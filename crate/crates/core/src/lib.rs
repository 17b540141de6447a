//! Probabilistic remaining-useful-life prediction for lithium-ion cells.
//!
//! The model is a mixture of chemistry-specialized experts. Each expert maps a
//! fixed-layout feature vector (chemistry one-hot, cell ratings, and a resampled
//! discharge curve) to a vector of non-crossing quantiles of remaining cycle
//! life; a learned softmax gate blends the experts per cell. A smoothing step
//! turns any quantile vector into a full predictive distribution with pdf, cdf,
//! survival probabilities, and prediction intervals.
//!
//! Module map:
//! - [`linalg`]: dense row-major matrix used by every network component
//! - [`nn`]: layers, activations, Adam, and a finite-difference gradient checker
//! - [`expert`]: residual quantile network with a structurally monotone head
//! - [`gating`]: softmax gate over experts
//! - [`moe`]: combined model, pinball loss, joint forward/backward
//! - [`train`]: two-stage training protocol (per-chemistry experts, then joint)
//! - [`dist`]: quantiles -> smoothed predictive distribution
//! - [`dataio`]: cell records, feature construction, splits, synthetic data
//! - [`metrics`]: point-forecast metrics and interval coverage
//! - [`model_io`]: versioned, checksummed model file

pub mod dataio;
pub mod dist;
pub mod error;
pub mod expert;
pub mod gating;
pub mod linalg;
pub mod metrics;
pub mod model_io;
pub mod moe;
pub mod nn;
pub mod train;

pub(crate) mod seeds;

pub use dataio::{
    build_features, interpolate_curve, parse_cells, split_records, synth_generate, CellRecord,
    Chemistry, ChemistryProfile, DischargeCurve, FeatureScaler, FeatureVector, ParseMode,
    SynthSpec, DEFAULT_CURVE_CYCLE, FEATURE_DIM,
};
pub use dist::{
    normal_cdf, normal_pdf, normal_quantile, prediction_interval, prediction_interval_interpolated,
    select_bandwidth, DistributionSummary, PredictionInterval, PredictiveDistribution,
    QuantileLevels, QuantileVector,
};
pub use error::{Error, Result};
pub use expert::{ExpertInit, ExpertOutput, ExpertParams};
pub use gating::{GateWeights, GatingInit, GatingParams};
pub use linalg::Matrix;
pub use metrics::{compute_metrics, interval_coverage, Metrics};
pub use model_io::{load_model, save_model};
pub use moe::{quantile_score, quantile_score_batch, MoEModel};
pub use train::{
    datasets_from_records, evaluate_point, joint_quantile_loss, joint_quantile_loss_grads,
    train_full, train_stage1, train_stage2, Dataset, EpochRecord, Stage1Result, Stage2Result,
    StageReport, TrainConfig, TrainReport,
};
