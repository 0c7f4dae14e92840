//! Estimation metrics: time-averaged squared error with cross-mode state
//! mapping, mode-prediction accuracy, transition-timing offsets, and
//! across-trial aggregation.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::filter::EstimateRecord;
use crate::hybrid::{HybridSystem, ModeId};
use crate::systems::TruthRollout;

/// Map a state into `target` mode's representation through the registered
/// reset when the modes differ (SLIP modes have different dimensions, so
/// differencing requires a common space).
pub fn map_to_mode(
    system: &HybridSystem,
    x: &DVector<f64>,
    aux: &[f64],
    from: ModeId,
    target: ModeId,
    t: f64,
) -> Result<DVector<f64>> {
    if from == target {
        return Ok(x.clone());
    }
    let idx = system
        .transition_between(from, target)
        .ok_or(Error::ModeMismatch { target })?;
    Ok(system.transition(idx).reset(t, x, aux).0)
}

/// Time-averaged squared estimation error `(1/N) Σ ‖x − x̂‖²`, with the
/// estimate mapped into the truth's mode before differencing at mismatched
/// steps. Estimates are aligned so `estimates[j]` corresponds to
/// `truth.states[j+1]`.
pub fn mean_mse(
    system: &HybridSystem,
    estimates: &[EstimateRecord],
    truth: &TruthRollout,
) -> Result<f64> {
    Ok(average(&squared_errors(system, estimates, truth)?))
}

/// Per-step squared errors (the series behind [`mean_mse`]).
pub fn squared_errors(
    system: &HybridSystem,
    estimates: &[EstimateRecord],
    truth: &TruthRollout,
) -> Result<Vec<f64>> {
    if estimates.len() != truth.n_steps() {
        return Err(Error::Shape {
            what: format!(
                "estimate/truth grid mismatch: {} vs {}",
                estimates.len(),
                truth.n_steps()
            ),
        });
    }
    let mut errs = Vec::with_capacity(estimates.len());
    for (j, est) in estimates.iter().enumerate() {
        let truth_state = &truth.states[j + 1];
        let mapped = map_to_mode(
            system,
            &est.x_hat,
            &est.aux_hat,
            est.mode_hat,
            truth_state.mode,
            truth_state.t,
        )?;
        errs.push((&mapped - &truth_state.x).norm_squared());
    }
    Ok(errs)
}

fn average(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean squared error restricted to steps strictly after the truth's first
/// transition; `None` when the truth never transitions.
pub fn post_transition_mean(sq_errors: &[f64], truth: &TruthRollout) -> Option<f64> {
    let (step, _) = truth.transitions.first()?;
    // estimates[j] sits at t_{j+1}; the transition lands at t_{step+1}
    let first_post = *step + 1;
    if first_post >= sq_errors.len() {
        return None;
    }
    Some(average(&sq_errors[first_post..]))
}

#[derive(Debug, Clone)]
pub struct ModeMetrics {
    /// Per-step indicator of `mode_hat == true mode`.
    pub correct: Vec<bool>,
    /// First time the estimated mode leaves the truth's initial mode.
    pub est_transition_t: Option<f64>,
    /// `est − true` first-transition offset in seconds; `None` when the
    /// estimate never transitions (horizon-censored).
    pub offset: Option<f64>,
}

/// Mode-prediction accuracy and first-transition timing against the truth.
pub fn mode_metrics(estimates: &[EstimateRecord], truth: &TruthRollout) -> ModeMetrics {
    let initial = truth.states[0].mode;
    let correct: Vec<bool> = estimates
        .iter()
        .enumerate()
        .map(|(j, e)| e.mode_hat == truth.states[j + 1].mode)
        .collect();
    let est_transition_t = estimates.iter().find(|e| e.mode_hat != initial).map(|e| e.t);
    let offset = match (est_transition_t, truth.first_transition_time()) {
        (Some(e), Some(t)) => Some(e - t),
        _ => None,
    };
    ModeMetrics { correct, est_transition_t, offset }
}

/// Sample mean and unbiased variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// Histogram of transition-time offsets with dt-wide bins over ±`range`,
/// plus overflow and horizon-censored counts.
#[derive(Debug, Clone)]
pub struct OffsetHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub outside: usize,
    pub censored: usize,
}

pub fn offset_histogram(offsets: &[Option<f64>], dt: f64, range: f64) -> OffsetHistogram {
    let n_bins = (2.0 * range / dt).ceil() as usize;
    let lo = -range;
    let mut counts = vec![0usize; n_bins];
    let mut outside = 0;
    let mut censored = 0;
    for o in offsets {
        match o {
            None => censored += 1,
            Some(v) => {
                let idx = ((v - lo) / dt).floor();
                if idx < 0.0 || idx >= n_bins as f64 {
                    outside += 1;
                } else {
                    counts[idx as usize] += 1;
                }
            }
        }
    }
    let bin_edges = (0..=n_bins).map(|i| lo + i as f64 * dt).collect();
    OffsetHistogram { bin_edges, counts, outside, censored }
}

/// Average a per-trial series across trials, ignoring NaN entries; returns
/// (mean series, count series).
pub fn average_series(series: &[&[f64]]) -> (Vec<f64>, Vec<usize>) {
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut mean = vec![0.0; len];
    let mut count = vec![0usize; len];
    for s in series {
        for (i, v) in s.iter().enumerate() {
            if v.is_finite() {
                mean[i] += v;
                count[i] += 1;
            }
        }
    }
    for (m, c) in mean.iter_mut().zip(&count) {
        *m = if *c > 0 { *m / *c as f64 } else { f64::NAN };
    }
    (mean, count)
}

/// Variance companion to [`average_series`].
pub fn variance_series(series: &[&[f64]], mean: &[f64]) -> Vec<f64> {
    let len = mean.len();
    let mut var = vec![0.0; len];
    let mut count = vec![0usize; len];
    for s in series {
        for (i, v) in s.iter().enumerate() {
            if v.is_finite() && mean[i].is_finite() {
                var[i] += (v - mean[i]).powi(2);
                count[i] += 1;
            }
        }
    }
    for (v, c) in var.iter_mut().zip(&count) {
        *v = if *c > 1 { *v / (*c - 1) as f64 } else { 0.0 };
    }
    var
}

/// Average per-trial series aligned at each trial's transition step: output
/// index `o + max_pre` holds the mean over trials of `series[step_tr + o]`.
pub fn transition_aligned_average(
    series: &[&[f64]],
    transition_steps: &[usize],
    max_pre: usize,
    max_post: usize,
) -> Vec<(i64, f64, usize)> {
    let mut out = Vec::with_capacity(max_pre + max_post + 1);
    for o in -(max_pre as i64)..=(max_post as i64) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (s, &tr) in series.iter().zip(transition_steps) {
            let idx = tr as i64 + o;
            if idx >= 0 && (idx as usize) < s.len() && s[idx as usize].is_finite() {
                sum += s[idx as usize];
                n += 1;
            }
        }
        out.push((o, if n > 0 { sum / n as f64 } else { f64::NAN }, n));
    }
    out
}
