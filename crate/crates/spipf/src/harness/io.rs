//! CSV schemas for truth rollouts, measurement paths, estimate records, and
//! experiment outputs. Floats are written with Rust's shortest round-trip
//! formatting, so re-reading a file reproduces the in-memory values exactly
//! and byte-identical reruns follow from seeded determinism.

use std::path::Path;

use nalgebra::DVector;

use crate::cost::MeasurementPath;
use crate::error::{Error, Result};
use crate::filter::EstimateRecord;
use crate::hybrid::ModeId;
use crate::systems::TruthRollout;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// FNV-1a over the f64 bit patterns of a measurement path; used to assert
/// that every algorithm in a trial consumed the identical data.
pub fn measurement_hash(path: &MeasurementPath) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bits: u64| {
        for b in bits.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for t in &path.times {
        eat(t.to_bits());
    }
    for dy in &path.increments {
        for v in dy.iter() {
            eat(v.to_bits());
        }
    }
    for m in &path.mode_labels {
        eat(m.0 as u64);
    }
    h
}

/// Truth rollout: `t, mode, x1..xD` (blank-padded to the widest mode) plus a
/// companion `*_transitions.csv` with `step, t, from, to`.
pub fn write_truth_csv(path: &Path, truth: &TruthRollout) -> Result<()> {
    let max_dim = truth.states.iter().map(|s| s.x.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "mode".to_string()];
    header.extend((1..=max_dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for s in &truth.states {
        let mut row = vec![fmt(s.t), s.mode.0.to_string()];
        for i in 0..max_dim {
            row.push(if i < s.x.len() { fmt(s.x[i]) } else { String::new() });
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let tr_path = companion(path, "_transitions");
    let mut w = csv::Writer::from_path(&tr_path)?;
    w.write_record(["step", "t", "from", "to"])?;
    for (step, ev) in &truth.transitions {
        w.write_record(&[step.to_string(), fmt(ev.t), ev.from.0.to_string(), ev.to.0.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn companion(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Measurements: `t, dy1..dyp, true_mode`, one row per increment at its left
/// endpoint.
pub fn write_measurements_csv(path: &Path, meas: &MeasurementPath) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=meas.obs_dim).map(|i| format!("dy{i}")));
    header.push("true_mode".into());
    w.write_record(&header)?;
    for (i, dy) in meas.increments.iter().enumerate() {
        let mut row = vec![fmt(meas.times[i])];
        row.extend(dy.iter().map(|v| fmt(*v)));
        row.push(meas.mode_labels[i].0.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_measurements_csv`] (σ_B must be supplied, it is not
/// part of the schema).
pub fn read_measurements_csv(path: &Path, dt_last: f64, sigma_b: Vec<f64>) -> Result<MeasurementPath> {
    let mut r = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut increments = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let n = rec.len();
        let t: f64 = parse(&rec[0])?;
        let dy: Vec<f64> = (1..n - 1).map(|i| parse(&rec[i])).collect::<Result<_>>()?;
        let mode: usize = rec[n - 1].parse().map_err(|_| Error::Config {
            context: format!("bad mode label {:?}", &rec[n - 1]),
        })?;
        times.push(t);
        increments.push(DVector::from_vec(dy));
        labels.push(ModeId(mode));
    }
    if let Some(&last) = times.last() {
        times.push(last + dt_last);
    }
    MeasurementPath::new(times, increments, sigma_b, labels)
}

fn parse(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Config { context: format!("bad float {s:?}") })
}

/// Estimates: `t, mode_hat, esse, x1..xD` (blank-padded).
pub fn write_estimates_csv(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    let max_dim = records.iter().map(|r| r.x_hat.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "mode_hat".to_string(), "esse".to_string()];
    header.extend((1..=max_dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![fmt(r.t), r.mode_hat.0.to_string(), fmt(r.esse)];
        for i in 0..max_dim {
            row.push(if i < r.x_hat.len() { fmt(r.x_hat[i]) } else { String::new() });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One per-trial metrics row per (sweep value, trial, algorithm).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub sweep_value: f64,
    pub trial: usize,
    pub algorithm: String,
    pub status: String,
    pub mean_mse: f64,
    pub post_mean_mse: f64,
    pub mean_esse: f64,
    pub est_transition_t: f64,
    pub true_transition_t: f64,
    pub offset: f64,
    pub meas_hash: u64,
}

pub fn write_trials_csv(path: &Path, rows: &[TrialRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep_value",
        "trial",
        "algorithm",
        "status",
        "mean_mse",
        "post_mean_mse",
        "mean_esse",
        "est_transition_t",
        "true_transition_t",
        "offset",
        "meas_hash",
    ])?;
    for r in rows {
        w.write_record(&[
            fmt(r.sweep_value),
            r.trial.to_string(),
            r.algorithm.clone(),
            r.status.clone(),
            fmt(r.mean_mse),
            fmt(r.post_mean_mse),
            fmt(r.mean_esse),
            fmt(r.est_transition_t),
            fmt(r.true_transition_t),
            fmt(r.offset),
            r.meas_hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(TrialRow {
            sweep_value: parse(&rec[0])?,
            trial: rec[1].parse().unwrap_or(0),
            algorithm: rec[2].to_string(),
            status: rec[3].to_string(),
            mean_mse: parse(&rec[4])?,
            post_mean_mse: parse(&rec[5])?,
            mean_esse: parse(&rec[6])?,
            est_transition_t: parse(&rec[7])?,
            true_transition_t: parse(&rec[8])?,
            offset: parse(&rec[9])?,
            meas_hash: rec[10].parse().unwrap_or(0),
        });
    }
    Ok(rows)
}

/// Aggregate row per (sweep value, algorithm).
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub sweep_param: String,
    pub sweep_value: f64,
    pub algorithm: String,
    pub n_trials: usize,
    pub retained: usize,
    pub failed: usize,
    pub mean_mse: f64,
    pub mse_covariance: f64,
    pub post_mean_mse: f64,
    pub post_mse_covariance: f64,
    pub mean_esse: f64,
    pub mode_within_tol_frac: f64,
    pub censored: usize,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep_param",
        "sweep_value",
        "algorithm",
        "n_trials",
        "retained",
        "failed",
        "mean_mse",
        "mse_covariance",
        "post_mean_mse",
        "post_mse_covariance",
        "mean_esse",
        "mode_within_tol_frac",
        "censored",
    ])?;
    for r in rows {
        w.write_record(&[
            r.sweep_param.clone(),
            fmt(r.sweep_value),
            r.algorithm.clone(),
            r.n_trials.to_string(),
            r.retained.to_string(),
            r.failed.to_string(),
            fmt(r.mean_mse),
            fmt(r.mse_covariance),
            fmt(r.post_mean_mse),
            fmt(r.post_mse_covariance),
            fmt(r.mean_esse),
            fmt(r.mode_within_tol_frac),
            r.censored.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step trial-averaged series: `step, t, sqerr_mean, sqerr_var,
/// esse_mean, mode_acc` (the plot-data file behind the MSE/ESSE figures).
pub fn write_series_csv(
    path: &Path,
    times: &[f64],
    sqerr_mean: &[f64],
    sqerr_var: &[f64],
    esse_mean: &[f64],
    mode_acc: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "sqerr_mean", "sqerr_var", "esse_mean", "mode_acc"])?;
    for i in 0..sqerr_mean.len() {
        w.write_record(&[
            i.to_string(),
            fmt(times[i]),
            fmt(sqerr_mean[i]),
            fmt(sqerr_var[i]),
            fmt(esse_mean[i]),
            fmt(mode_acc[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Transition-aligned averages: `offset_steps, esse_mean, mode_acc, n`.
pub fn write_aligned_csv(
    path: &Path,
    esse: &[(i64, f64, usize)],
    mode_acc: &[(i64, f64, usize)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["offset_steps", "esse_mean", "mode_acc", "n"])?;
    for (e, m) in esse.iter().zip(mode_acc) {
        w.write_record(&[e.0.to_string(), fmt(e.1), fmt(m.1), e.2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(
    path: &Path,
    hist: &crate::harness::metrics::OffsetHistogram,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record(&[fmt(hist.bin_edges[i]), fmt(hist.bin_edges[i + 1]), c.to_string()])?;
    }
    w.write_record(["outside", "", &hist.outside.to_string()])?;
    w.write_record(["censored", "", &hist.censored.to_string()])?;
    w.flush()?;
    Ok(())
}
