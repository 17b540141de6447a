//! The six subcommand implementations and their shared plumbing: path
//! validation, atomic CSV writing, and record/feature loading.
//!
//! Every number in a CSV is written with Rust's shortest-round-trip float
//! formatting, so emitted files are byte-stable across runs and parse back
//! to the exact in-memory value.

use std::fs;
use std::path::{Path, PathBuf};

use qmoe::{
    build_features, compute_metrics, datasets_from_records, interval_coverage, load_model,
    parse_cells, prediction_interval, save_model, synth_generate, train_full, CellRecord, Dataset,
    Matrix, Metrics, MoEModel, ParseMode, PredictionInterval, PredictiveDistribution,
    QuantileVector, SynthSpec, TrainReport, FEATURE_DIM,
};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Paths are validated before any work begins; a missing input is the
/// caller's mistake, not a runtime failure.
pub(crate) fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{what} {} does not exist or is not a regular file",
            path.display()
        )))
    }
}

/// Write through a temp file and rename, so an interrupted run never leaves
/// a torn output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let attempt = (|| -> std::io::Result<()> {
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)
    })();
    attempt.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::runtime(format!("writing {}: {e}", path.display()))
    })
}

/// Shortest-round-trip float formatting: `.` decimal separator, locale-free.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| CliError::runtime(format!("encoding csv: {e}"));
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(row).map_err(io_err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::runtime(format!("encoding csv: {e}")))
}

fn load_records(path: &Path, what: &str) -> CliResult<Vec<CellRecord>> {
    require_file(path, what)?;
    Ok(parse_cells(path, ParseMode::Strict)?.records)
}

fn load_model_checked(path: &Path) -> CliResult<MoEModel> {
    require_file(path, "model file")?;
    Ok(load_model(path)?)
}

fn features_matrix(records: &[CellRecord], curve_cycle: u32) -> CliResult<Matrix> {
    let mut data = Vec::with_capacity(records.len() * FEATURE_DIM);
    for rec in records {
        data.extend(build_features(rec, curve_cycle)?);
    }
    Ok(Matrix::from_vec(records.len(), FEATURE_DIM, data)?)
}

/// One cell's quantile vector, tied back to the model's levels.
fn row_quantiles(model: &MoEModel, quantiles: &Matrix, row: usize) -> CliResult<QuantileVector> {
    Ok(QuantileVector::new(
        quantiles.row(row).to_vec(),
        model.levels().clone(),
    )?)
}

fn smooth(cfg: &RunConfig, quantiles: QuantileVector) -> CliResult<PredictiveDistribution> {
    Ok(match cfg.bandwidth {
        Some(b) => PredictiveDistribution::with_bandwidth(quantiles, b)?,
        None => PredictiveDistribution::from_quantiles(quantiles),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// The loss report: per-epoch rows for each stage, a summary row per stage,
/// the uniform-mixture baseline, and every training warning. Wall-clock
/// time is deliberately absent so identical runs produce identical bytes.
fn report_csv(report: &TrainReport) -> CliResult<Vec<u8>> {
    let header: Vec<String> = ["record_type", "stage", "chemistry", "epoch", "train_qs", "val_qs", "detail"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for (chem, sr) in &report.stage1 {
        for e in &sr.epochs {
            rows.push(vec![
                "epoch".into(),
                "1".into(),
                chem.name().into(),
                e.epoch.to_string(),
                num(e.train_qs),
                num(e.val_qs),
                String::new(),
            ]);
        }
        rows.push(vec![
            "summary".into(),
            "1".into(),
            chem.name().into(),
            sr.best_epoch.to_string(),
            String::new(),
            opt_num(sr.best_val_qs),
            format!("stopped_early={}", sr.stopped_early),
        ]);
    }
    if let Some(sr) = &report.stage2 {
        rows.push(vec![
            "baseline".into(),
            "2".into(),
            "ALL".into(),
            String::new(),
            String::new(),
            opt_num(report.uniform_baseline_qs),
            "uniform mixture of frozen stage-1 experts".into(),
        ]);
        for e in &sr.epochs {
            rows.push(vec![
                "epoch".into(),
                "2".into(),
                "ALL".into(),
                e.epoch.to_string(),
                num(e.train_qs),
                num(e.val_qs),
                String::new(),
            ]);
        }
        rows.push(vec![
            "summary".into(),
            "2".into(),
            "ALL".into(),
            sr.best_epoch.to_string(),
            String::new(),
            opt_num(sr.best_val_qs),
            format!(
                "stopped_early={} regressed={}",
                sr.stopped_early, report.stage2_regressed
            ),
        ]);
    }
    for w in &report.warnings {
        rows.push(vec![
            "warning".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            w.clone(),
        ]);
    }
    csv_bytes(&header, &rows)
}

pub(crate) fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    verbose: bool,
) -> CliResult<()> {
    let data_path = data.or_else(|| cfg.data.clone()).ok_or_else(|| {
        CliError::validation("no training data: pass --data or set `data=` in the config")
    })?;
    let out_dir = out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
        CliError::validation("no output directory: pass --out or set `out_dir=` in the config")
    })?;
    let records = load_records(&data_path, "training data")?;
    let datasets = datasets_from_records(&records, cfg.curve_cycle)?;
    let (model, report) = train_full(&datasets, &cfg.train)?;

    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;
    let model_path = out_dir.join("model.qmoe");
    save_model(&model, &model_path)?;
    let report_path = out_dir.join("train_report.csv");
    write_atomic(&report_path, &report_csv(&report)?)?;

    println!(
        "trained {} expert(s) on {} cell(s); model -> {}, report -> {}",
        model.expert_count(),
        records.len(),
        model_path.display(),
        report_path.display()
    );
    if verbose {
        for (chem, sr) in &report.stage1 {
            println!(
                "  stage 1 {}: {} epoch(s), best epoch {}, best val QS {}",
                chem.name(),
                sr.epochs.len(),
                sr.best_epoch,
                opt_num(sr.best_val_qs)
            );
        }
        if let Some(sr) = &report.stage2 {
            println!(
                "  stage 2: {} epoch(s), best epoch {}, best val QS {} (uniform baseline {})",
                sr.epochs.len(),
                sr.best_epoch,
                opt_num(sr.best_val_qs),
                opt_num(report.uniform_baseline_qs)
            );
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub(crate) fn cmd_predict(
    cfg: &RunConfig,
    model_path: &Path,
    input: &Path,
    out: &Path,
    quantiles: Option<&str>,
) -> CliResult<()> {
    let model = load_model_checked(model_path)?;
    let records = load_records(input, "input file")?;

    let all_levels = model.levels().as_slice().to_vec();
    let selected: Vec<f64> = match quantiles {
        Some(list) => {
            let mut taus = Vec::new();
            for part in list.split(',') {
                let part = part.trim();
                let tau: f64 = part.parse().map_err(|_| {
                    CliError::validation(format!("--quantiles: invalid level {part:?}"))
                })?;
                if model.levels().index_of(tau).is_none() {
                    return Err(CliError::validation(format!(
                        "--quantiles: level {tau} is not stored in the model \
                         (available: {all_levels:?})"
                    )));
                }
                taus.push(tau);
            }
            taus
        }
        None => all_levels,
    };

    let mut header: Vec<String> = vec!["cell_id".into()];
    for chem in model.chemistries() {
        header.push(format!("gate_w_{}", chem.name()));
    }
    for &tau in &selected {
        header.push(format!("q_{tau}"));
    }
    header.extend(["median".into(), "pi90_lower".into(), "pi90_upper".into()]);

    let mut rows = Vec::with_capacity(records.len());
    if !records.is_empty() {
        let x = features_matrix(&records, cfg.curve_cycle)?;
        let (quantiles, probs) = model.predict_batch(&x)?;
        for (r, rec) in records.iter().enumerate() {
            let qv = row_quantiles(&model, &quantiles, r)?;
            let median = qv.value_at(0.5)?;
            let pi = prediction_interval(&qv, 0.1)?;
            let mut row = vec![rec.cell_id.clone()];
            row.extend(probs.row(r).iter().map(|&p| num(p)));
            for &tau in &selected {
                row.push(num(qv.value_at(tau)?));
            }
            row.extend([num(median), num(pi.lower), num(pi.upper)]);
            rows.push(row);
        }
    }
    write_atomic(out, &csv_bytes(&header, &rows)?)?;
    println!("wrote {} prediction row(s) to {}", rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// survival
// ---------------------------------------------------------------------------

pub(crate) fn cmd_survival(
    cfg: &RunConfig,
    model_path: &Path,
    input: &Path,
    threshold: f64,
    out: &Path,
    verbose: bool,
) -> CliResult<()> {
    if !threshold.is_finite() {
        return Err(CliError::validation(format!(
            "--threshold must be finite, got {threshold}"
        )));
    }
    let model = load_model_checked(model_path)?;
    let records = load_records(input, "input file")?;

    let header: Vec<String> = ["cell_id", "survival", "cdf", "bandwidth"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::with_capacity(records.len());
    if !records.is_empty() {
        let x = features_matrix(&records, cfg.curve_cycle)?;
        let (quantiles, _) = model.predict_batch(&x)?;
        for (r, rec) in records.iter().enumerate() {
            let dist = smooth(cfg, row_quantiles(&model, &quantiles, r)?)?;
            let survival = dist.survival(threshold);
            let cdf = dist.cdf(threshold);
            rows.push(vec![
                rec.cell_id.clone(),
                num(survival),
                num(cdf),
                num(dist.bandwidth()),
            ]);
            if verbose {
                println!(
                    "cell {}: {:.1}% chance of operating for at least an additional \
                     {threshold} cycles",
                    rec.cell_id,
                    100.0 * survival
                );
            }
        }
    }
    write_atomic(out, &csv_bytes(&header, &rows)?)?;
    println!("wrote {} survival row(s) to {}", rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Point metrics plus 90%-interval coverage for one block of rows.
fn score_block(model: &MoEModel, data: &Dataset) -> CliResult<(Metrics, f64)> {
    let (quantiles, _) = model.predict_batch(data.features())?;
    let median_idx = model
        .levels()
        .median_index()
        .ok_or_else(|| CliError::validation(format!(
            "model stores no median quantile (levels: {:?})",
            model.levels().as_slice()
        )))?;
    let medians: Vec<f64> = (0..quantiles.rows())
        .map(|r| quantiles.row(r)[median_idx])
        .collect();
    let metrics = compute_metrics(data.labels(), &medians)?;
    let mut intervals: Vec<PredictionInterval> = Vec::with_capacity(quantiles.rows());
    for r in 0..quantiles.rows() {
        let qv = row_quantiles(model, &quantiles, r)?;
        intervals.push(prediction_interval(&qv, 0.1)?);
    }
    let coverage = interval_coverage(data.labels(), &intervals)?;
    Ok((metrics, coverage))
}

fn metrics_row(label: &str, m: &Metrics, coverage: f64) -> Vec<String> {
    vec![
        label.to_string(),
        m.count.to_string(),
        num(m.mae),
        opt_num(m.mape),
        num(m.rmse),
        opt_num(m.r2),
        num(coverage),
    ]
}

fn human_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub(crate) fn cmd_evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    data_path: &Path,
    out: &Path,
) -> CliResult<()> {
    let model = load_model_checked(model_path)?;
    let records = load_records(data_path, "evaluation data")?;
    let datasets = datasets_from_records(&records, cfg.curve_cycle)?;

    let header: Vec<String> = ["chemistry", "count", "mae", "mape", "rmse", "r2", "coverage90"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    let mut human = Vec::new();
    let mut pooled_features = Vec::new();
    let mut pooled_labels = Vec::new();
    for (chem, ds) in &datasets {
        let (m, coverage) = score_block(&model, ds)?;
        rows.push(metrics_row(chem.name(), &m, coverage));
        human.push((chem.name().to_string(), m, coverage));
        pooled_features.extend_from_slice(ds.features().data());
        pooled_labels.extend_from_slice(ds.labels());
    }
    let pooled = Dataset::new(
        Matrix::from_vec(pooled_labels.len(), FEATURE_DIM, pooled_features)?,
        pooled_labels,
    )?;
    let (m_all, coverage_all) = score_block(&model, &pooled)?;
    rows.push(metrics_row("ALL", &m_all, coverage_all));
    human.push(("ALL".to_string(), m_all, coverage_all));
    write_atomic(out, &csv_bytes(&header, &rows)?)?;

    println!(
        "{:<10} {:>7} {:>12} {:>10} {:>12} {:>9} {:>11}",
        "chemistry", "count", "mae", "mape", "rmse", "r2", "coverage90"
    );
    for (label, m, coverage) in &human {
        println!(
            "{:<10} {:>7} {:>12.4} {:>10} {:>12.4} {:>9} {:>11.4}",
            label,
            m.count,
            m.mae,
            human_cell(m.mape),
            m.rmse,
            human_cell(m.r2),
            coverage
        );
    }
    println!("csv -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub(crate) fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut spec = match spec {
        Some(path) => {
            require_file(path, "spec file")?;
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| {
                CliError::validation(format!("spec file {}: {e}", path.display()))
            })?
        }
        None => SynthSpec::demo(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let records = synth_generate(&spec)?;

    let mut bytes = Vec::new();
    for rec in &records {
        let line = serde_json::to_string(rec)
            .map_err(|e| CliError::runtime(format!("encoding record {}: {e}", rec.cell_id)))?;
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
    }
    write_atomic(out, &bytes)?;

    println!(
        "wrote {} cell(s) across {} profile(s) to {} (seed {})",
        records.len(),
        spec.profiles.len(),
        out.display(),
        spec.seed
    );
    println!("ground-truth label law per profile, with s ~ U(0,1) latent health:");
    for p in &spec.profiles {
        println!(
            "  {}: RUL = {} + {}*s + Normal(0, {});  Q(tau|s) = {} + {}*s + {}*z_tau",
            p.chemistry.name(),
            num(p.rul_offset),
            num(p.rul_scale),
            num(p.noise_std),
            num(p.rul_offset),
            num(p.rul_scale),
            num(p.noise_std)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plotdata
// ---------------------------------------------------------------------------

pub(crate) fn cmd_plotdata(
    cfg: &RunConfig,
    model_path: &Path,
    input: &Path,
    cell: &str,
    out: &Path,
) -> CliResult<()> {
    let model = load_model_checked(model_path)?;
    let records = load_records(input, "input file")?;
    let record = records.iter().find(|r| r.cell_id == cell).ok_or_else(|| {
        CliError::validation(format!(
            "unknown cell id {cell:?} ({} cell(s) in {})",
            records.len(),
            input.display()
        ))
    })?;

    let x = build_features(record, cfg.curve_cycle)?;
    let dist = smooth(cfg, model.predict(&x)?)?;
    let values = dist.quantiles().values();
    let b = dist.bandwidth();
    let lo = values[0] - 4.0 * b;
    let hi = values[values.len() - 1] + 4.0 * b;

    let header: Vec<String> = ["y", "pdf", "cdf", "survival"].map(String::from).to_vec();
    let mut rows = Vec::with_capacity(1000);
    for i in 0..1000 {
        let y = lo + (hi - lo) * i as f64 / 999.0;
        rows.push(vec![
            num(y),
            num(dist.pdf(y)),
            num(dist.cdf(y)),
            num(dist.survival(y)),
        ]);
    }
    write_atomic(out, &csv_bytes(&header, &rows)?)?;
    println!(
        "wrote 1000 grid row(s) for cell {} over [{}, {}] to {}",
        cell,
        num(lo),
        num(hi),
        out.display()
    );
    Ok(())
}
