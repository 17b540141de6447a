//! Two-stage training: per-chemistry experts, then joint gate + fine-tune.
//!
//! Stage 1 trains one expert per chemistry on that chemistry's training
//! split, each minimizing the quantile score with Adam, with early stopping
//! on validation loss and a best-epoch parameter snapshot. Stage 2 freezes
//! nothing: a freshly initialized (and therefore exactly uniform) gate is
//! trained jointly with the warm-started experts on the pooled data, the
//! gate at its own learning rate and the experts at the smaller fine-tuning
//! rate. Before stage 2 takes a step, the uniform-mixture validation score
//! of the frozen warm-start experts is recorded as a baseline; if the best
//! stage-2 score never beats it, the report flags the regression rather
//! than hiding it.
//!
//! Unless a separate validation fraction is configured, early stopping
//! monitors the held-out split produced by the 70/30 partition, mirroring
//! the protocol the default hyperparameters come from.
//!
//! Every source of randomness — splits, initializations, shuffles, dropout
//! — is a ChaCha stream derived from the one config seed, and batch
//! gradients are reduced over a fixed number of contiguous chunks in a
//! fixed order, so training is bit-for-bit reproducible across runs and
//! thread counts. Labels are standardized per expert via the fixed output
//! transform (mean and deviation of that chemistry's training labels), so
//! optimization happens at unit scale no matter whether labels are tens or
//! thousands of cycles; the transform is data-derived, not trained.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{
    build_features, split_indices, CellRecord, Chemistry, FeatureScaler,
};
use crate::dist::QuantileLevels;
use crate::error::{Error, Result};
use crate::expert::{ExpertInit, ExpertParams, Mode};
use crate::gating::{GatingInit, GatingParams};
use crate::linalg::{dot, Matrix};
use crate::metrics::{compute_metrics, Metrics};
use crate::moe::{quantile_score, quantile_score_batch, quantile_score_grad_into, MoEModel};
use crate::nn::{AdamConfig, AdamState};
use crate::seeds::{self, stream};

/// Hyperparameters for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Stage-1 Adam learning rate.
    pub learning_rate: f64,
    /// Stage-2 learning rate for the warm-started experts ("fine-tuning"
    /// steps one order smaller than stage 1).
    pub stage2_learning_rate: f64,
    /// Stage-2 learning rate for the gate; `None` means the stage-1 rate,
    /// since the gate trains from scratch.
    pub gate_learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Expert hidden width.
    pub hidden_dim: usize,
    /// Gate hidden widths.
    pub gate_hidden_dims: [usize; 3],
    /// Epoch cap per stage.
    pub max_epochs: usize,
    /// Early stopping: give up after this many epochs without a new best
    /// validation loss.
    pub patience: usize,
    /// Train fraction of each chemistry's data; the rest is held out.
    pub split_ratio: f64,
    /// If set, carve this fraction of the training split into a dedicated
    /// validation set and leave the held-out split untouched; if `None`,
    /// early stopping monitors the held-out split.
    pub validation_fraction: Option<f64>,
    pub dropout_rate: f64,
    pub seed: u64,
    pub levels: QuantileLevels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            stage2_learning_rate: 0.0001,
            gate_learning_rate: None,
            batch_size: 256,
            hidden_dim: 256,
            gate_hidden_dims: crate::gating::DEFAULT_GATE_HIDDEN,
            max_epochs: 500,
            patience: 20,
            split_ratio: 0.7,
            validation_fraction: None,
            dropout_rate: 0.0,
            seed: 42,
            levels: QuantileLevels::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("stage2_learning_rate", self.stage2_learning_rate),
            ("gate_learning_rate", self.gate_learning_rate.unwrap_or(self.learning_rate)),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim", "must be >= 1"));
        }
        if self.gate_hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("gate_hidden_dims", "widths must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience", "must be >= 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid(
                "split_ratio",
                format!("must be in (0, 1), got {}", self.split_ratio),
            ));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(
                    "validation_fraction",
                    format!("must be in (0, 1), got {f}"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "dropout_rate",
                format!("must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        Ok(())
    }

    fn effective_gate_lr(&self) -> f64 {
        self.gate_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Features (one row per sample) paired with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::dim("dataset labels", features.rows(), labels.len()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                block: "dataset features".to_string(),
            });
        }
        if labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                block: "dataset labels".to_string(),
            });
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Gather the given rows into a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(idx.len(), self.input_dim());
        let mut labels = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels }
    }
}

/// Group parsed records by chemistry (canonical order, absent chemistries
/// skipped) and build each group's feature matrix from the curve at
/// `curve_cycle`, labeled by `rul_cycles`.
pub fn datasets_from_records(
    records: &[CellRecord],
    curve_cycle: u32,
) -> Result<Vec<(Chemistry, Dataset)>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to build datasets from".to_string()));
    }
    let features: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| build_features(r, curve_cycle))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for chem in Chemistry::ALL {
        let idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.chemistry == chem)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
        let labels: Vec<f64> = idx.iter().map(|&i| records[i].rul_cycles).collect();
        out.push((chem, Dataset::new(Matrix::from_rows(&rows)?, labels)?));
    }
    Ok(out)
}

/// One epoch's losses. Epochs are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_qs: f64,
    pub val_qs: f64,
}

/// Loss curve and stopping outcome for one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 if no epoch ran).
    pub best_epoch: usize,
    /// Best validation quantile score; `None` if no epoch ran.
    pub best_val_qs: Option<f64>,
    /// Whether patience ran out before the epoch cap.
    pub stopped_early: bool,
}

/// Everything `train_full` has to report.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage1: Vec<(Chemistry, StageReport)>,
    pub stage2: Option<StageReport>,
    /// Validation quantile score of the frozen warm-start experts under
    /// uniform mixing, measured before any stage-2 step.
    pub uniform_baseline_qs: Option<f64>,
    /// True if stage 2 never beat the uniform baseline.
    pub stage2_regressed: bool,
    pub warnings: Vec<String>,
    /// Wall-clock time; informational only and deliberately excluded from
    /// serialized reports, which must be byte-identical across reruns.
    pub wall_seconds: f64,
}

/// Stage-1 output: one trained expert per usable chemistry partition.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub experts: Vec<(Chemistry, ExpertParams)>,
    pub reports: Vec<(Chemistry, StageReport)>,
    pub warnings: Vec<String>,
}

/// Stage-2 output: the assembled model plus its training record.
#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub model: MoEModel,
    pub report: StageReport,
    pub uniform_baseline_qs: f64,
    pub regressed: bool,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Deterministic plumbing shared by both stages.

/// Fixed gradient-reduction fan-out. Batch rows are split into this many
/// contiguous chunks whose gradients are computed in parallel and summed in
/// chunk order, making the reduction independent of thread scheduling.
const GRAD_CHUNKS: usize = 8;

fn chunk_bounds(n: usize) -> Vec<(usize, usize)> {
    let chunks = GRAD_CHUNKS.min(n.max(1));
    (0..chunks)
        .map(|c| (c * n / chunks, (c + 1) * n / chunks))
        .filter(|(lo, hi)| hi > lo)
        .collect()
}

fn rows_slice(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    let cols = m.cols();
    Matrix::from_vec(hi - lo, cols, m.data()[lo * cols..hi * cols].to_vec())
        .expect("contiguous row slice keeps its shape")
}

/// Stable tag for per-batch randomness: chemistry (or a stage marker),
/// epoch, and batch index packed into one stream offset.
fn batch_tag(lane: usize, epoch: usize, batch: usize) -> u64 {
    ((lane as u64) << 48) | (((epoch as u64) & 0xFF_FFFF) << 24) | ((batch as u64) & 0xFF_FFFF)
}

fn block_namer(layout: Vec<(String, usize)>) -> impl Fn(usize) -> String {
    move |i| {
        let mut offset = 0;
        for (name, len) in &layout {
            if i < offset + len {
                return name.clone();
            }
            offset += len;
        }
        "out of range".to_string()
    }
}

/// Early-stopping bookkeeping: strict improvement resets the clock; after
/// `patience` epochs without one, stop and keep the best epoch's snapshot.
struct EarlyStopper {
    patience: usize,
    best_epoch: usize,
    best_val: f64,
}

#[derive(Debug, PartialEq, Eq)]
enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best_epoch: 0,
            best_val: f64::INFINITY,
        }
    }

    fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        if val < self.best_val {
            self.best_val = val;
            self.best_epoch = epoch;
            return StopDecision::Improved;
        }
        if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Label mean and deviation for an expert's fixed output transform. A
/// degenerate (constant-label) partition falls back to unit scale.
fn label_transform(labels: &[f64]) -> (f64, f64) {
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < 1e-9 { 1.0 } else { std })
}

/// Starting gap between adjacent quantiles, in standardized label units:
/// spread the central 90% of the training labels evenly over the K levels,
/// so the initial quantile fan roughly spans the label distribution instead
/// of starting collapsed or absurdly wide.
fn initial_gap_for(labels: &[f64], mean: f64, scale: f64, k: usize) -> f64 {
    let mut std_labels: Vec<f64> = labels.iter().map(|y| (y - mean) / scale).collect();
    std_labels.sort_by(|a, b| a.partial_cmp(b).expect("finite labels"));
    let pick = |tau: f64| std_labels[((std_labels.len() - 1) as f64 * tau).round() as usize];
    let span = pick(0.95) - pick(0.05);
    (span / k as f64).max(1e-3)
}

/// Per-chemistry train/validation index plan.
struct Partition {
    data_index: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

/// Canonically ordered dataset references with shape checks.
fn ordered<'a>(data: &'a [(Chemistry, Dataset)]) -> Result<Vec<(Chemistry, &'a Dataset)>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no chemistry datasets given".to_string()));
    }
    let mut refs: Vec<(Chemistry, &Dataset)> = data.iter().map(|(c, d)| (*c, d)).collect();
    refs.sort_by_key(|(c, _)| c.index());
    for w in refs.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::invalid(
                "datasets",
                format!("two datasets for chemistry {}", w[0].0),
            ));
        }
    }
    let mut dim: Option<usize> = None;
    for (chem, ds) in &refs {
        if ds.is_empty() {
            continue;
        }
        match dim {
            None => dim = Some(ds.input_dim()),
            Some(d) if d != ds.input_dim() => {
                return Err(Error::dim(
                    format!("{chem} dataset feature width"),
                    d,
                    ds.input_dim(),
                ))
            }
            _ => {}
        }
    }
    Ok(refs)
}

/// Split every usable chemistry partition; report the unusable ones.
fn plan_partitions(
    refs: &[(Chemistry, &Dataset)],
    cfg: &TrainConfig,
) -> Result<(Vec<Partition>, Vec<String>)> {
    let mut parts = Vec::new();
    let mut warnings = Vec::new();
    for (i, (chem, ds)) in refs.iter().enumerate() {
        if ds.len() < 2 {
            warnings.push(format!(
                "skipping {chem}: {} sample(s), need at least 2 to split",
                ds.len()
            ));
            continue;
        }
        let split_seed = seeds::derive(cfg.seed, stream::SPLIT, chem.index() as u64);
        let (mut train, test) = split_indices(ds.len(), cfg.split_ratio, split_seed)?;
        if train.is_empty() {
            warnings.push(format!(
                "skipping {chem}: training split is empty at ratio {}",
                cfg.split_ratio
            ));
            continue;
        }
        let mut val = match cfg.validation_fraction {
            Some(f) => {
                let n_val = (f * train.len() as f64).floor() as usize;
                train.split_off(train.len() - n_val)
            }
            None => test,
        };
        if val.is_empty() {
            warnings.push(format!(
                "{chem}: validation split is empty; early stopping monitors the training loss"
            ));
            val = train.clone();
        }
        parts.push(Partition {
            data_index: i,
            train,
            val,
        });
    }
    if parts.is_empty() {
        return Err(Error::Training(
            "every chemistry partition is empty or too small to train on".to_string(),
        ));
    }
    Ok((parts, warnings))
}

// ---------------------------------------------------------------------------
// Stage 1.

/// Chunk-parallel quantile-score gradient step for one expert. Returns the
/// batch's mean loss (computed from the pre-step parameters).
fn expert_batch_step(
    expert: &mut ExpertParams,
    adam: &mut AdamState,
    x: &Matrix,
    y: &[f64],
    levels: &[f64],
    dropout_master: u64,
) -> Result<f64> {
    let n = x.rows();
    let frozen = &*expert;
    let results: Vec<(f64, Vec<f64>)> = chunk_bounds(n)
        .par_iter()
        .enumerate()
        .map(|(ci, &(lo, hi))| {
            let xc = rows_slice(x, lo, hi);
            let mut rng = seeds::rng(dropout_master, stream::DROPOUT_STAGE1, ci as u64);
            let fwd = frozen.forward(&xc, Mode::Train(&mut rng))?;
            let k = levels.len();
            let mut dq = Matrix::zeros(xc.rows(), k);
            let mut loss_sum = 0.0;
            for (r, &label) in y[lo..hi].iter().enumerate() {
                loss_sum += quantile_score(label, fwd.quantiles.row(r), levels);
                quantile_score_grad_into(
                    label,
                    fwd.quantiles.row(r),
                    levels,
                    1.0 / n as f64,
                    dq.row_mut(r),
                );
            }
            let mut grads = frozen.zeros_like();
            frozen.backward(&xc, &fwd, &dq, &mut grads);
            Ok((loss_sum, grads.to_flat()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad_flat = vec![0.0; expert.param_count()];
    let mut loss_sum = 0.0;
    for (chunk_loss, chunk_grad) in &results {
        loss_sum += chunk_loss;
        for (g, &c) in grad_flat.iter_mut().zip(chunk_grad) {
            *g += c;
        }
    }
    let mut params = expert.to_flat();
    adam.step(&mut params, &grad_flat, block_namer(expert.layout()))?;
    expert.load_flat(&params)?;
    Ok(loss_sum / n as f64)
}

/// Train one chemistry's expert to its best validation snapshot.
fn train_one_expert(
    chem: Chemistry,
    ds: &Dataset,
    part: &Partition,
    cfg: &TrainConfig,
) -> Result<(ExpertParams, StageReport)> {
    let train = ds.subset(&part.train);
    let val = ds.subset(&part.val);
    let levels = cfg.levels.as_slice().to_vec();
    let k = levels.len();

    let (label_mean, label_scale) = label_transform(train.labels());
    let mut init = ExpertInit::new(
        ds.input_dim(),
        cfg.hidden_dim,
        k,
        seeds::derive(cfg.seed, stream::EXPERT_INIT, chem.index() as u64),
    );
    init.dropout_rate = cfg.dropout_rate;
    init.initial_gap = initial_gap_for(train.labels(), label_mean, label_scale, k);
    let mut expert = ExpertParams::init(&init)?;
    expert.set_output_transform(label_mean, label_scale)?;
    let mut adam = AdamState::new(
        expert.param_count(),
        AdamConfig::with_learning_rate(cfg.learning_rate),
    );

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_flat = expert.to_flat();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(
            cfg.seed,
            stream::SHUFFLE_STAGE1,
            batch_tag(chem.index(), epoch, 0),
        ));
        let mut loss_weighted = 0.0;
        for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.subset(batch_idx);
            let dropout_master =
                seeds::derive(cfg.seed, stream::DROPOUT_STAGE1, batch_tag(chem.index(), epoch, bi));
            let loss = expert_batch_step(
                &mut expert,
                &mut adam,
                batch.features(),
                batch.labels(),
                &levels,
                dropout_master,
            )?;
            loss_weighted += loss * batch_idx.len() as f64;
        }
        let train_qs = loss_weighted / train.len() as f64;
        let val_fwd = expert.forward(val.features(), Mode::Infer)?;
        let val_qs = quantile_score_batch(val.labels(), &val_fwd.quantiles, &levels);
        if !train_qs.is_finite() || !val_qs.is_finite() {
            return Err(Error::Training(format!(
                "{chem}: loss became non-finite at epoch {epoch}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_qs,
            val_qs,
        });
        match stopper.observe(epoch, val_qs) {
            StopDecision::Improved => best_flat = expert.to_flat(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    expert.load_flat(&best_flat)?;
    let report = StageReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_qs: if stopper.best_val.is_finite() {
            Some(stopper.best_val)
        } else {
            None
        },
        stopped_early,
    };
    Ok((expert, report))
}

/// Stage 1: train every usable chemistry's expert (in parallel — the runs
/// are independent, with independently derived seeds).
pub fn train_stage1(data: &[(Chemistry, Dataset)], cfg: &TrainConfig) -> Result<Stage1Result> {
    cfg.validate()?;
    let refs = ordered(data)?;
    let (parts, warnings) = plan_partitions(&refs, cfg)?;
    let trained: Vec<(Chemistry, ExpertParams, StageReport)> = parts
        .par_iter()
        .map(|part| {
            let (chem, ds) = refs[part.data_index];
            let (expert, report) = train_one_expert(chem, ds, part, cfg)?;
            Ok((chem, expert, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut experts = Vec::with_capacity(trained.len());
    let mut reports = Vec::with_capacity(trained.len());
    for (chem, expert, report) in trained {
        experts.push((chem, expert));
        reports.push((chem, report));
    }
    Ok(Stage1Result {
        experts,
        reports,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Joint forward/backward (stage 2 and the gradient-check surface).

/// Shared core: forward every expert and the gate, combine convexly, score,
/// and push the score's subgradient back through combination, experts, and
/// gate. Returns the loss SUM over rows; parameter gradients are scaled by
/// `grad_scale` per row (pass `1/n_total` to accumulate a mean-loss
/// gradient across chunks).
fn joint_core(
    experts: &[ExpertParams],
    gate: &GatingParams,
    x: &Matrix,
    y: &[f64],
    levels: &[f64],
    mut dropout_rngs: Option<&mut [ChaCha8Rng]>,
    grad_scale: f64,
) -> Result<(f64, Vec<ExpertParams>, GatingParams)> {
    let n = x.rows();
    let k = levels.len();
    let e_count = experts.len();
    let gate_fwd = gate.forward(x)?;

    let mut expert_fwds = Vec::with_capacity(e_count);
    for (i, expert) in experts.iter().enumerate() {
        let mode = match dropout_rngs.as_deref_mut() {
            Some(rngs) => Mode::Train(&mut rngs[i]),
            None => Mode::Infer,
        };
        expert_fwds.push(expert.forward(x, mode)?);
    }

    let mut combined = Matrix::zeros(n, k);
    for (i, fwd) in expert_fwds.iter().enumerate() {
        for r in 0..n {
            let p = gate_fwd.probs[(r, i)];
            for (c, &q) in combined.row_mut(r).iter_mut().zip(fwd.quantiles.row(r)) {
                *c += p * q;
            }
        }
    }

    let mut loss_sum = 0.0;
    let mut d_combined = Matrix::zeros(n, k);
    for r in 0..n {
        loss_sum += quantile_score(y[r], combined.row(r), levels);
        quantile_score_grad_into(y[r], combined.row(r), levels, grad_scale, d_combined.row_mut(r));
    }

    let mut expert_grads: Vec<ExpertParams> = experts.iter().map(|e| e.zeros_like()).collect();
    let mut d_probs = Matrix::zeros(n, e_count);
    for (i, (expert, fwd)) in experts.iter().zip(&expert_fwds).enumerate() {
        let mut dq = Matrix::zeros(n, k);
        for r in 0..n {
            let p = gate_fwd.probs[(r, i)];
            for (d, &g) in dq.row_mut(r).iter_mut().zip(d_combined.row(r)) {
                *d = p * g;
            }
            d_probs[(r, i)] = dot(d_combined.row(r), fwd.quantiles.row(r));
        }
        expert.backward(x, fwd, &dq, &mut expert_grads[i]);
    }
    let mut gate_grads = gate.zeros_like();
    gate.backward(x, &gate_fwd, &d_probs, &mut gate_grads);
    Ok((loss_sum, expert_grads, gate_grads))
}

/// Mean quantile score of the convex expert combination (dropout off).
pub fn joint_quantile_loss(
    experts: &[ExpertParams],
    gate: &GatingParams,
    x: &Matrix,
    y: &[f64],
    levels: &[f64],
) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::dim("joint loss labels", x.rows(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("joint loss".to_string()));
    }
    let gate_fwd = gate.forward(x)?;
    let k = levels.len();
    let mut combined = Matrix::zeros(x.rows(), k);
    for (i, expert) in experts.iter().enumerate() {
        let fwd = expert.forward(x, Mode::Infer)?;
        for r in 0..x.rows() {
            let p = gate_fwd.probs[(r, i)];
            for (c, &q) in combined.row_mut(r).iter_mut().zip(fwd.quantiles.row(r)) {
                *c += p * q;
            }
        }
    }
    Ok(quantile_score_batch(y, &combined, levels))
}

/// Mean quantile score plus its full analytic gradient with respect to
/// every expert parameter and every gate parameter, dropout off — the
/// differentiation surface the finite-difference checks probe.
pub fn joint_quantile_loss_grads(
    experts: &[ExpertParams],
    gate: &GatingParams,
    x: &Matrix,
    y: &[f64],
    levels: &[f64],
) -> Result<(f64, Vec<ExpertParams>, GatingParams)> {
    if x.rows() != y.len() {
        return Err(Error::dim("joint loss labels", x.rows(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("joint loss".to_string()));
    }
    let n = x.rows() as f64;
    let (loss_sum, eg, gg) = joint_core(experts, gate, x, y, levels, None, 1.0 / n)?;
    Ok((loss_sum / n, eg, gg))
}

/// Chunk-parallel joint gradient step. Experts and the gate advance with
/// their own Adam states (and learning rates).
#[allow(clippy::too_many_arguments)]
fn joint_batch_step(
    experts: &mut [ExpertParams],
    gate: &mut GatingParams,
    expert_adams: &mut [AdamState],
    gate_adam: &mut AdamState,
    x: &Matrix,
    y: &[f64],
    levels: &[f64],
    dropout_master: u64,
    use_dropout: bool,
) -> Result<f64> {
    let n = x.rows();
    let frozen_experts = &*experts;
    let frozen_gate = &*gate;
    type ChunkOut = (f64, Vec<Vec<f64>>, Vec<f64>);
    let results: Vec<ChunkOut> = chunk_bounds(n)
        .par_iter()
        .enumerate()
        .map(|(ci, &(lo, hi))| {
            let xc = rows_slice(x, lo, hi);
            let yc = &y[lo..hi];
            let mut rngs: Vec<ChaCha8Rng> = (0..frozen_experts.len())
                .map(|ei| {
                    seeds::rng(
                        dropout_master,
                        stream::DROPOUT_STAGE2,
                        ((ei as u64) << 32) | ci as u64,
                    )
                })
                .collect();
            let dropout = if use_dropout { Some(&mut rngs[..]) } else { None };
            let (loss_sum, eg, gg) = joint_core(
                frozen_experts,
                frozen_gate,
                &xc,
                yc,
                levels,
                dropout,
                1.0 / n as f64,
            )?;
            Ok((
                loss_sum,
                eg.iter().map(|g| g.to_flat()).collect(),
                gg.to_flat(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss_sum = 0.0;
    let mut expert_flats: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| vec![0.0; e.param_count()])
        .collect();
    let mut gate_flat = vec![0.0; gate.param_count()];
    for (chunk_loss, chunk_eg, chunk_gg) in &results {
        loss_sum += chunk_loss;
        for (acc, part) in expert_flats.iter_mut().zip(chunk_eg) {
            for (a, &p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        for (a, &p) in gate_flat.iter_mut().zip(chunk_gg) {
            *a += p;
        }
    }

    for ((expert, adam), grads) in experts.iter_mut().zip(expert_adams).zip(&expert_flats) {
        let mut params = expert.to_flat();
        adam.step(&mut params, grads, block_namer(expert.layout()))?;
        expert.load_flat(&params)?;
    }
    let mut params = gate.to_flat();
    gate_adam.step(&mut params, &gate_flat, block_namer(gate.layout()))?;
    gate.load_flat(&params)?;
    Ok(loss_sum / n as f64)
}

/// Pool the chosen index set of every partition, in canonical chemistry
/// order, into one dataset.
fn pool(
    refs: &[(Chemistry, &Dataset)],
    parts: &[Partition],
    pick: impl Fn(&Partition) -> &[usize],
) -> Dataset {
    let dim = refs[parts[0].data_index].1.input_dim();
    let total: usize = parts.iter().map(|p| pick(p).len()).sum();
    let mut features = Matrix::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    let mut r = 0;
    for part in parts {
        let ds = refs[part.data_index].1;
        for &i in pick(part) {
            features.row_mut(r).copy_from_slice(ds.features().row(i));
            labels.push(ds.labels()[i]);
            r += 1;
        }
    }
    Dataset { features, labels }
}

/// Validation score of the frozen experts mixed with uniform weights.
fn uniform_mixture_qs(
    experts: &[(Chemistry, ExpertParams)],
    val: &Dataset,
    levels: &[f64],
) -> Result<f64> {
    let n = val.len();
    let k = levels.len();
    let p = 1.0 / experts.len() as f64;
    let mut combined = Matrix::zeros(n, k);
    for (_, expert) in experts {
        let fwd = expert.forward(val.features(), Mode::Infer)?;
        for r in 0..n {
            for (c, &q) in combined.row_mut(r).iter_mut().zip(fwd.quantiles.row(r)) {
                *c += p * q;
            }
        }
    }
    Ok(quantile_score_batch(val.labels(), &combined, levels))
}

/// Stage 2: joint training of a fresh gate with warm-started experts on the
/// pooled data. The result carries the assembled model (with `scaler`
/// stored for prediction-time standardization — pass an identity scaler if
/// the data is already in model space).
pub fn train_stage2(
    data: &[(Chemistry, Dataset)],
    experts: Vec<(Chemistry, ExpertParams)>,
    scaler: FeatureScaler,
    cfg: &TrainConfig,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(Error::EmptyInput("stage 2 needs at least one expert".to_string()));
    }
    let refs = ordered(data)?;
    let (parts, warnings) = plan_partitions(&refs, cfg)?;
    let train = pool(&refs, &parts, |p| &p.train);
    let val = pool(&refs, &parts, |p| &p.val);
    let levels = cfg.levels.as_slice().to_vec();
    let input_dim = experts[0].1.input_dim();
    for (chem, e) in &experts {
        if e.input_dim() != input_dim || e.quantile_count() != levels.len() {
            return Err(Error::dim(
                format!("{chem} expert shape"),
                input_dim,
                e.input_dim(),
            ));
        }
    }
    if train.input_dim() != input_dim {
        return Err(Error::dim("stage-2 data width", input_dim, train.input_dim()));
    }

    let gate_init = GatingInit {
        input_dim,
        hidden_dims: cfg.gate_hidden_dims,
        expert_count: experts.len(),
        negative_slope: crate::nn::DEFAULT_LEAKY_SLOPE,
        seed: seeds::derive(cfg.seed, stream::GATE_INIT, 0),
    };
    let mut gate = GatingParams::init(&gate_init)?;

    let uniform_baseline_qs = uniform_mixture_qs(&experts, &val, &levels)?;

    let (chems, mut expert_params): (Vec<Chemistry>, Vec<ExpertParams>) =
        experts.into_iter().unzip();
    let mut expert_adams: Vec<AdamState> = expert_params
        .iter()
        .map(|e| {
            AdamState::new(
                e.param_count(),
                AdamConfig::with_learning_rate(cfg.stage2_learning_rate),
            )
        })
        .collect();
    let mut gate_adam = AdamState::new(
        gate.param_count(),
        AdamConfig::with_learning_rate(cfg.effective_gate_lr()),
    );

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_experts: Vec<Vec<f64>> = expert_params.iter().map(|e| e.to_flat()).collect();
    let mut best_gate = gate.to_flat();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let use_dropout = cfg.dropout_rate > 0.0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(
            cfg.seed,
            stream::SHUFFLE_STAGE2,
            batch_tag(0, epoch, 0),
        ));
        let mut loss_weighted = 0.0;
        for (bi, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.subset(batch_idx);
            let dropout_master =
                seeds::derive(cfg.seed, stream::DROPOUT_STAGE2, batch_tag(0, epoch, bi));
            let loss = joint_batch_step(
                &mut expert_params,
                &mut gate,
                &mut expert_adams,
                &mut gate_adam,
                batch.features(),
                batch.labels(),
                &levels,
                dropout_master,
                use_dropout,
            )?;
            loss_weighted += loss * batch_idx.len() as f64;
        }
        let train_qs = loss_weighted / train.len() as f64;
        let val_qs = joint_quantile_loss(&expert_params, &gate, val.features(), val.labels(), &levels)?;
        if !train_qs.is_finite() || !val_qs.is_finite() {
            return Err(Error::Training(format!(
                "stage 2: loss became non-finite at epoch {epoch}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_qs,
            val_qs,
        });
        match stopper.observe(epoch, val_qs) {
            StopDecision::Improved => {
                best_experts = expert_params.iter().map(|e| e.to_flat()).collect();
                best_gate = gate.to_flat();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    for (expert, flat) in expert_params.iter_mut().zip(&best_experts) {
        expert.load_flat(flat)?;
    }
    gate.load_flat(&best_gate)?;

    let best_val_qs = if stopper.best_val.is_finite() {
        Some(stopper.best_val)
    } else {
        None
    };
    let regressed = matches!(best_val_qs, Some(v) if v > uniform_baseline_qs);
    let mut warnings = warnings;
    if regressed {
        warnings.push(format!(
            "stage 2 best validation QS {:.6} did not beat the uniform-mixture baseline {:.6}",
            stopper.best_val, uniform_baseline_qs
        ));
    }

    let model = MoEModel::new(
        chems.into_iter().zip(expert_params).collect(),
        gate,
        cfg.levels.clone(),
        scaler,
    )?;
    Ok(Stage2Result {
        model,
        report: StageReport {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_qs,
            stopped_early,
        },
        uniform_baseline_qs,
        regressed,
        warnings,
    })
}

/// Both stages end to end on raw (unscaled) per-chemistry datasets: fit the
/// feature scaler on the pooled training rows, standardize everything once,
/// train experts then the gated mixture, and return the model with the
/// scaler baked in.
pub fn train_full(
    data: &[(Chemistry, Dataset)],
    cfg: &TrainConfig,
) -> Result<(MoEModel, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let refs = ordered(data)?;
    let (parts, _) = plan_partitions(&refs, cfg)?;
    let train_rows = pool(&refs, &parts, |p| &p.train);
    let scaler = FeatureScaler::fit(train_rows.features())?;

    let scaled: Vec<(Chemistry, Dataset)> = refs
        .iter()
        .map(|(chem, ds)| {
            let features = scaler.transform(ds.features())?;
            Ok((*chem, Dataset::new(features, ds.labels().to_vec())?))
        })
        .collect::<Result<Vec<_>>>()?;

    let stage1 = train_stage1(&scaled, cfg)?;
    let stage2 = train_stage2(&scaled, stage1.experts, scaler, cfg)?;

    let mut warnings = stage1.warnings;
    for w in stage2.warnings {
        if !warnings.contains(&w) {
            warnings.push(w);
        }
    }
    let report = TrainReport {
        stage1: stage1.reports,
        stage2: Some(stage2.report),
        uniform_baseline_qs: Some(stage2.uniform_baseline_qs),
        stage2_regressed: stage2.regressed,
        warnings,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((stage2.model, report))
}

/// Median-quantile point evaluation: predict `Q(0.5)` per sample and score
/// with the standard point metrics.
pub fn evaluate_point(model: &MoEModel, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluate_point".to_string()));
    }
    let median_idx = model
        .levels()
        .median_index()
        .ok_or_else(|| Error::LevelNotFound {
            requested: 0.5,
            available: model.levels().as_slice().to_vec(),
        })?;
    let (quantiles, _) = model.predict_batch(data.features())?;
    let medians: Vec<f64> = (0..quantiles.rows())
        .map(|r| quantiles.row(r)[median_idx])
        .collect();
    compute_metrics(data.labels(), &medians)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};

    fn linear_dataset(n: usize, noise: f64, seed: u64) -> Dataset {
        // y = 100 + 300x + Normal(0, noise), x in [0, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen();
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            rows.push(vec![x]);
            labels.push(100.0 + 300.0 * x + noise * z);
        }
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden_dim: 16,
            gate_hidden_dims: [8, 8, 8],
            batch_size: 64,
            max_epochs: 40,
            patience: 10,
            levels: QuantileLevels::new(vec![0.1, 0.25, 0.5, 0.75, 0.9]).unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.split_ratio = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.validation_fraction = Some(0.0);
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn early_stopper_keeps_the_best_epoch_and_stops_after_patience() {
        // Improvements through epoch 3, strictly worse afterwards, patience
        // 20: training must stop at epoch 23 with epoch 3 as the keeper.
        let mut stopper = EarlyStopper::new(20);
        assert_eq!(stopper.observe(1, 5.0), StopDecision::Improved);
        assert_eq!(stopper.observe(2, 4.0), StopDecision::Improved);
        assert_eq!(stopper.observe(3, 3.0), StopDecision::Improved);
        for epoch in 4..23 {
            assert_eq!(
                stopper.observe(epoch, 3.0 + epoch as f64),
                StopDecision::Continue,
                "epoch {epoch} should still be within patience"
            );
        }
        assert_eq!(stopper.observe(23, 30.0), StopDecision::Stop);
        assert_eq!(stopper.best_epoch, 3);
        assert_eq!(stopper.best_val, 3.0);
        // A tie does not count as improvement.
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 2.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 2.0), StopDecision::Stop);
    }

    #[test]
    fn chunking_covers_every_row_in_order() {
        for n in [1usize, 3, 7, 8, 9, 100, 256] {
            let bounds = chunk_bounds(n);
            assert!(bounds.len() <= GRAD_CHUNKS);
            assert_eq!(bounds[0].0, 0);
            assert_eq!(bounds.last().unwrap().1, n);
            for w in bounds.windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
        }
    }

    #[test]
    fn stage1_training_is_deterministic_across_runs() {
        let data = vec![(Chemistry::Lfp, linear_dataset(200, 10.0, 1))];
        let mut cfg = small_cfg();
        cfg.max_epochs = 3;
        let a = train_stage1(&data, &cfg).unwrap();
        let b = train_stage1(&data, &cfg).unwrap();
        assert_eq!(a.experts[0].1, b.experts[0].1, "parameters must match bitwise");
        assert_eq!(a.reports[0].1, b.reports[0].1, "loss curves must match bitwise");
        // A different seed changes the run.
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = train_stage1(&data, &cfg2).unwrap();
        assert_ne!(a.reports[0].1.epochs, c.reports[0].1.epochs);
    }

    #[test]
    fn stage1_with_dropout_is_also_deterministic() {
        let data = vec![(Chemistry::Nca, linear_dataset(150, 5.0, 2))];
        let mut cfg = small_cfg();
        cfg.max_epochs = 2;
        cfg.dropout_rate = 0.3;
        let a = train_stage1(&data, &cfg).unwrap();
        let b = train_stage1(&data, &cfg).unwrap();
        assert_eq!(a.experts[0].1, b.experts[0].1);
        assert_eq!(a.reports[0].1, b.reports[0].1);
    }

    #[test]
    fn stage1_learns_a_noise_free_linear_median() {
        // With no label noise every conditional quantile collapses onto the
        // line; a short run must already track it closely.
        let data = vec![(Chemistry::Lfp, linear_dataset(600, 0.0, 3))];
        let mut cfg = small_cfg();
        cfg.max_epochs = 150;
        cfg.patience = 150;
        let out = train_stage1(&data, &cfg).unwrap();
        let (_, expert) = &out.experts[0];
        let report = &out.reports[0].1;
        assert!(report.epochs.len() > 5);
        let first = report.epochs.first().unwrap().val_qs;
        let best = report.best_val_qs.unwrap();
        assert!(
            best < first * 0.2,
            "validation QS should fall hard on a noise-free task: {first} -> {best}"
        );
        // Median predictions on a held-out grid track 100 + 300x.
        let median_idx = 2;
        let mut worst = 0.0f64;
        for i in 0..21 {
            let x = i as f64 / 20.0;
            let out = expert.predict_one(&[x]).unwrap();
            let err = (out.quantiles[median_idx] - (100.0 + 300.0 * x)).abs();
            worst = worst.max(err);
        }
        assert!(
            worst < 15.0,
            "median should track the line within 5% of its range, worst abs err {worst}"
        );
    }

    #[test]
    fn tiny_and_empty_partitions_are_skipped_with_warnings() {
        let one_sample = Dataset::new(
            Matrix::from_rows(&[vec![0.5]]).unwrap(),
            vec![100.0],
        )
        .unwrap();
        let data = vec![
            (Chemistry::Lfp, linear_dataset(100, 5.0, 4)),
            (Chemistry::Nca, one_sample.clone()),
        ];
        let mut cfg = small_cfg();
        cfg.max_epochs = 2;
        let out = train_stage1(&data, &cfg).unwrap();
        assert_eq!(out.experts.len(), 1);
        assert_eq!(out.experts[0].0, Chemistry::Lfp);
        assert!(out.warnings.iter().any(|w| w.contains("NCA")), "{:?}", out.warnings);

        // Every partition unusable is an error, not a silent no-op.
        let all_tiny = vec![(Chemistry::Nca, one_sample)];
        assert!(train_stage1(&all_tiny, &cfg).is_err());
    }

    #[test]
    fn empty_validation_carve_falls_back_to_train_loss_with_warning() {
        let data = vec![(Chemistry::Lfp, linear_dataset(4, 1.0, 5))];
        let mut cfg = small_cfg();
        cfg.max_epochs = 1;
        // floor(0.05 * 2 train samples) = 0 -> fallback.
        cfg.validation_fraction = Some(0.05);
        let out = train_stage1(&data, &cfg).unwrap();
        assert!(
            out.warnings.iter().any(|w| w.contains("validation split is empty")),
            "{:?}",
            out.warnings
        );
    }

    #[test]
    fn duplicate_chemistry_datasets_are_rejected() {
        let data = vec![
            (Chemistry::Lfp, linear_dataset(50, 1.0, 6)),
            (Chemistry::Lfp, linear_dataset(50, 1.0, 7)),
        ];
        assert!(train_stage1(&data, &small_cfg()).is_err());
    }

    #[test]
    fn zero_epoch_stage2_returns_warm_start_with_fresh_uniform_gate() {
        let data = vec![
            (Chemistry::Lfp, linear_dataset(80, 5.0, 8)),
            (Chemistry::Nca, linear_dataset(80, 5.0, 9)),
        ];
        let mut cfg = small_cfg();
        cfg.max_epochs = 4;
        let s1 = train_stage1(&data, &cfg).unwrap();
        let warm = s1.experts.clone();

        cfg.max_epochs = 0;
        let s2 = train_stage2(&data, s1.experts, FeatureScaler::identity(1), &cfg).unwrap();
        assert!(s2.report.epochs.is_empty());
        assert_eq!(s2.report.best_epoch, 0);
        assert_eq!(s2.report.best_val_qs, None);
        assert!(!s2.regressed);
        // Experts unchanged bitwise; gate exactly uniform on any input.
        for ((c0, e0), (c1, e1)) in warm.iter().zip(s2.model.experts()) {
            assert_eq!(c0, c1);
            assert_eq!(e0, e1);
        }
        let w = s2.model.gate().weights_one(&[0.37]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn stage2_improves_on_the_uniform_baseline_for_distinct_scales() {
        // Two chemistries with far-apart label scales and a feature that
        // separates them; the gate must learn to route.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut make = |flag: f64, offset: f64| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..150 {
                let x: f64 = rng.gen();
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                rows.push(vec![x, flag]);
                labels.push(offset + 200.0 * x + 5.0 * z);
            }
            Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
        };
        let data = vec![
            (Chemistry::Lfp, make(0.0, 100.0)),
            (Chemistry::Nmc, make(1.0, 2000.0)),
        ];
        let mut cfg = small_cfg();
        cfg.max_epochs = 30;
        cfg.patience = 30;
        let s1 = train_stage1(&data, &cfg).unwrap();
        let s2 = train_stage2(&data, s1.experts, FeatureScaler::identity(2), &cfg).unwrap();
        let best = s2.report.best_val_qs.unwrap();
        assert!(
            best <= s2.uniform_baseline_qs,
            "gated mixture {best} must not lose to uniform {}",
            s2.uniform_baseline_qs
        );
        assert!(!s2.regressed);
        // Routing: the flag feature should dominate the gate's choice.
        let w_lfp = s2.model.gate().weights_one(&[0.5, 0.0]).unwrap();
        let w_nmc = s2.model.gate().weights_one(&[0.5, 1.0]).unwrap();
        assert!(w_lfp[0] > 0.5, "LFP-flagged input routed to the LFP expert: {w_lfp:?}");
        assert!(w_nmc[1] > 0.5, "NMC-flagged input routed to the NMC expert: {w_nmc:?}");
    }

    #[test]
    fn full_training_is_deterministic_and_evaluate_point_reports_median_fit() {
        let data = vec![
            (Chemistry::Lfp, linear_dataset(120, 5.0, 11)),
            (Chemistry::Lco, linear_dataset(120, 5.0, 12)),
        ];
        let mut cfg = small_cfg();
        cfg.max_epochs = 8;
        let (model_a, report_a) = train_full(&data, &cfg).unwrap();
        let (model_b, report_b) = train_full(&data, &cfg).unwrap();
        assert_eq!(model_a, model_b);
        assert_eq!(report_a.stage1, report_b.stage1);
        assert_eq!(report_a.stage2, report_b.stage2);
        assert_eq!(report_a.uniform_baseline_qs, report_b.uniform_baseline_qs);

        let metrics = evaluate_point(&model_a, &data[0].1).unwrap();
        assert!(metrics.mae.is_finite());
        assert_eq!(metrics.count, 120);

        // Median evaluation needs a 0.5 level.
        let mut no_median = cfg.clone();
        no_median.levels = QuantileLevels::new(vec![0.25, 0.75]).unwrap();
        no_median.max_epochs = 1;
        let (m, _) = train_full(&data, &no_median).unwrap();
        assert!(matches!(
            evaluate_point(&m, &data[0].1),
            Err(Error::LevelNotFound { .. })
        ));
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        // Small joint model, full parameter vector (two experts + gate).
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let input_dim = 4;
        let k = 3;
        let levels = [0.2, 0.5, 0.8];
        let mut experts = vec![
            ExpertParams::init(&ExpertInit::new(input_dim, 6, k, 31)).unwrap(),
            ExpertParams::init(&ExpertInit::new(input_dim, 6, k, 32)).unwrap(),
        ];
        experts[0].set_output_transform(2.0, 3.0).unwrap();
        experts[1].set_output_transform(-1.0, 0.5).unwrap();
        let mut gate = GatingParams::init(&GatingInit {
            input_dim,
            hidden_dims: [5, 4, 3],
            expert_count: 2,
            negative_slope: 0.01,
            seed: 33,
        })
        .unwrap();
        // Randomize the gate's zero final layer too, so its gradient path
        // is exercised at a generic point.
        let mut gate_flat = gate.to_flat();
        for v in &mut gate_flat {
            *v += rng.gen_range(-0.5..0.5);
        }
        gate.load_flat(&gate_flat).unwrap();

        let x = Matrix::from_rows(
            &(0..6)
                .map(|_| (0..input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..6.0)).collect();

        let (loss, eg, gg) = joint_quantile_loss_grads(&experts, &gate, &x, &y, &levels).unwrap();
        assert!(loss > 0.0);

        let mut params = Vec::new();
        let mut analytic = Vec::new();
        for (e, g) in experts.iter().zip(&eg) {
            params.extend(e.to_flat());
            analytic.extend(g.to_flat());
        }
        params.extend(gate.to_flat());
        analytic.extend(gg.to_flat());

        let e0_len = experts[0].param_count();
        let e1_len = experts[1].param_count();
        let experts_ref = experts.clone();
        let gate_ref = gate.clone();
        let loss_fn = |theta: &[f64]| {
            let mut es = experts_ref.clone();
            es[0].load_flat(&theta[..e0_len]).unwrap();
            es[1].load_flat(&theta[e0_len..e0_len + e1_len]).unwrap();
            let mut g = gate_ref.clone();
            g.load_flat(&theta[e0_len + e1_len..]).unwrap();
            joint_quantile_loss(&es, &g, &x, &y, &levels).unwrap()
        };
        // h = 1e-5 balances truncation against roundoff here: the loss is
        // O(0.1), so the difference quotient carries ~1e-12 of absolute fp
        // noise, and the smallest interesting gradient coordinates are
        // ~1e-7 — smaller steps amplify the noise ratio linearly.
        let max_rel = grad_check(loss_fn, &params, &analytic, 1e-5);
        assert!(
            max_rel < 1e-4,
            "joint gradient max relative error {max_rel}"
        );
    }

    #[test]
    fn datasets_from_records_group_by_chemistry_in_canonical_order() {
        use crate::dataio::synth::{synth_generate, SynthSpec};
        let mut spec = SynthSpec::demo();
        for p in &mut spec.profiles {
            p.count = 5;
        }
        // Drop one chemistry to prove absent groups are skipped.
        spec.profiles.retain(|p| p.chemistry != Chemistry::Lco);
        let records = synth_generate(&spec).unwrap();
        let data = datasets_from_records(&records, 100).unwrap();
        let chems: Vec<Chemistry> = data.iter().map(|(c, _)| *c).collect();
        assert_eq!(
            chems,
            vec![Chemistry::Lfp, Chemistry::Nca, Chemistry::Nmc, Chemistry::NmcLco]
        );
        for (_, ds) in &data {
            assert_eq!(ds.len(), 5);
            assert_eq!(ds.input_dim(), crate::dataio::FEATURE_DIM);
        }
        // Labels carry over.
        let lfp_labels: Vec<f64> = records
            .iter()
            .filter(|r| r.chemistry == Chemistry::Lfp)
            .map(|r| r.rul_cycles)
            .collect();
        assert_eq!(data[0].1.labels(), lfp_labels.as_slice());
        // Requesting a curve cycle nobody has fails loudly.
        assert!(datasets_from_records(&records, 7).is_err());
    }
}
