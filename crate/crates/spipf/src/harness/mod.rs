//! Experiment orchestration: TOML config parsing, seeded parallel Monte-Carlo
//! trials over K/H/dt sweeps, metric aggregation, and CSV emission.
//!
//! Within one trial every algorithm consumes the identical truth trajectory
//! and measurement path (asserted by content hash), and the same base seed,
//! so comparisons differ only in algorithm. Truth seeds derive from
//! `(seed, trial, dt)`: K and H sweeps share trials for paired comparisons
//! while a dt sweep regenerates its grids.

pub mod io;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::filter::{self, EstimateRecord, FilterConfig, PriorMode, PriorSpec};
use crate::hybrid::{HybridSystem, ModeId};
use crate::rng::{self, tags};
use crate::systems::{self, BouncingBallParams, SlipParams, TruthRollout};

pub use io::{SummaryRow, TrialRow};
pub use metrics::{mean_mse, mode_metrics, OffsetHistogram};

/// Band around the true transition time considered a correct mode detection.
pub const MODE_TIMING_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Spipf,
    Spipf0,
    Sir,
    Skf,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Spipf => "spipf",
            Algorithm::Spipf0 => "spipf0",
            Algorithm::Sir => "sir",
            Algorithm::Skf => "skf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spipf" => Ok(Algorithm::Spipf),
            "spipf0" => Ok(Algorithm::Spipf0),
            "sir" => Ok(Algorithm::Sir),
            "skf" => Ok(Algorithm::Skf),
            other => Err(Error::Config { context: format!("unknown algorithm {other:?}") }),
        }
    }
}

// ---------------------------------------------------------------------------
// Config file schema (TOML sections mirroring the runtime structures)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub filter: FilterSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSection {
    /// `bouncing_ball` or `slip`.
    pub name: String,
    /// Simulation horizon in seconds.
    pub horizon: f64,
    #[serde(default = "default_sigma_b")]
    pub sigma_b: f64,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default)]
    pub g: Option<f64>,
    /// Restitution coefficient (bouncing ball).
    #[serde(default)]
    pub e: Option<f64>,
    /// Spring constant (SLIP).
    #[serde(default)]
    pub k: Option<f64>,
    /// Rest leg length (SLIP).
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub classical_coriolis: Option<bool>,
    /// `full` (default) or `position` (bouncing ball only).
    #[serde(default)]
    pub observe: Option<String>,
}

fn default_sigma_b() -> f64 {
    systems::DEFAULT_SIGMA_B
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSection {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub dt: f64,
    pub epsilon: f64,
    #[serde(default = "default_gamma")]
    pub gamma_thres: f64,
    #[serde(default = "default_true")]
    pub resampling_enabled: bool,
    pub seed: u64,
    pub prior: PriorSection,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSection {
    pub modes: Vec<PriorModeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorModeSection {
    pub mode: usize,
    pub prob: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    #[serde(default)]
    pub aux: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    /// One of `K`, `H`, `dt`, or `none`.
    #[serde(default = "default_sweep")]
    pub sweep: String,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub mse_threshold: Option<f64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            sweep: default_sweep(),
            values: Vec::new(),
            n_trials: default_trials(),
            mse_threshold: None,
            algorithms: default_algorithms(),
            output_dir: default_output_dir(),
        }
    }
}

fn default_sweep() -> String {
    "none".into()
}

fn default_trials() -> usize {
    50
}

fn default_algorithms() -> Vec<String> {
    vec!["spipf".into(), "spipf0".into(), "sir".into(), "skf".into()]
}

fn default_output_dir() -> String {
    "out".into()
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ConfigFile = toml::from_str(&text)
            .map_err(|e| Error::Config { context: format!("{}: {e}", path.display()) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.n_trials == 0 {
            return Err(Error::Config { context: "n_trials must be ≥ 1".into() });
        }
        if !matches!(self.experiment.sweep.as_str(), "K" | "H" | "dt" | "none") {
            return Err(Error::Config {
                context: format!("sweep must be K, H, dt, or none, got {:?}", self.experiment.sweep),
            });
        }
        if self.experiment.sweep != "none" && self.experiment.values.is_empty() {
            return Err(Error::Config { context: "sweep values must be non-empty".into() });
        }
        for a in &self.experiment.algorithms {
            Algorithm::parse(a)?;
        }
        if self.filter.prior.modes.is_empty() {
            return Err(Error::Config { context: "prior needs at least one mode".into() });
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<HybridSystem> {
        self.build_system_with(self.filter.epsilon, self.filter.dt).map(|(s, _)| s)
    }

    fn build_system_with(&self, epsilon: f64, _dt: f64) -> Result<(HybridSystem, f64)> {
        let s = &self.system;
        let observation = match s.observe.as_deref() {
            None | Some("full") => systems::Observation::FullState,
            Some("position") => systems::Observation::PositionOnly,
            Some(other) => {
                return Err(Error::Config { context: format!("unknown observe mode {other:?}") })
            }
        };
        let sys = match s.name.as_str() {
            "bouncing_ball" => {
                let p = BouncingBallParams {
                    m: s.m.unwrap_or(1.0),
                    g: s.g.unwrap_or(9.81),
                    e: s.e.unwrap_or(0.8),
                };
                systems::bouncing_ball_observed(&p, epsilon, s.sigma_b, observation)
            }
            "slip" => {
                if observation == systems::Observation::PositionOnly {
                    return Err(Error::Config {
                        context: "position-only observation is bouncing-ball only".into(),
                    });
                }
                let p = SlipParams {
                    m: s.m.unwrap_or(1.0),
                    k: s.k.unwrap_or(64.0),
                    r0: s.r0.unwrap_or(1.0),
                    g: s.g.unwrap_or(9.81),
                    classical_coriolis: s.classical_coriolis.unwrap_or(false),
                };
                systems::slip_with(&p, epsilon, s.sigma_b)
            }
            other => {
                return Err(Error::Config { context: format!("unknown system {other:?}") });
            }
        };
        Ok((sys, s.horizon))
    }

    pub fn build_prior(&self) -> PriorSpec {
        PriorSpec {
            modes: self
                .filter
                .prior
                .modes
                .iter()
                .map(|m| PriorMode {
                    mode: ModeId(m.mode),
                    prob: m.prob,
                    mean: DVector::from_vec(m.mean.clone()),
                    cov: DMatrix::from_diagonal(&DVector::from_vec(m.cov_diag.clone())),
                    aux: m.aux.clone(),
                })
                .collect(),
        }
    }

    pub fn build_filter_config(&self) -> FilterConfig {
        let mut cfg = FilterConfig::new(self.build_prior());
        cfg.k = self.filter.k;
        cfg.h = self.filter.h;
        cfg.dt = self.filter.dt;
        cfg.epsilon = self.filter.epsilon;
        cfg.gamma_thres = self.filter.gamma_thres;
        cfg.resampling_enabled = self.filter.resampling_enabled;
        cfg.seed = self.filter.seed;
        cfg
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        self.experiment.algorithms.iter().map(|a| Algorithm::parse(a).unwrap()).collect()
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        if self.experiment.sweep == "none" {
            match self.experiment.sweep.as_str() {
                _ => vec![f64::NAN],
            }
        } else {
            self.experiment.values.clone()
        }
    }

    /// Filter config with one sweep value applied.
    pub fn apply_sweep(&self, value: f64) -> FilterConfig {
        let mut cfg = self.build_filter_config();
        match self.experiment.sweep.as_str() {
            "K" => cfg.k = value as usize,
            "H" => cfg.h = value as usize,
            "dt" => cfg.dt = value,
            _ => {}
        }
        cfg
    }
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AlgoTrialResult {
    pub algorithm: Algorithm,
    pub error: Option<String>,
    pub mean_mse: f64,
    pub post_mean_mse: f64,
    pub mean_esse: f64,
    pub est_transition_t: Option<f64>,
    pub offset: Option<f64>,
    pub sq_err: Vec<f64>,
    pub esse: Vec<f64>,
    pub mode_correct: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub sweep_value: f64,
    pub trial: usize,
    pub true_transition_t: Option<f64>,
    pub true_transition_step: Option<usize>,
    pub meas_hash: u64,
    pub algos: Vec<AlgoTrialResult>,
    /// Truth simulation failure, fatal for every algorithm in the trial.
    pub truth_error: Option<String>,
}

/// Run the selected algorithms on one simulated truth.
pub fn run_trial(
    cfg: &ConfigFile,
    filter_cfg: &FilterConfig,
    sweep_value: f64,
    trial: usize,
    algorithms: &[Algorithm],
) -> TrialResult {
    let trial_seed =
        rng::derive(filter_cfg.seed, &[tags::TRIAL, trial as u64, filter_cfg.dt.to_bits()]);
    let mut result = TrialResult {
        sweep_value,
        trial,
        true_transition_t: None,
        true_transition_step: None,
        meas_hash: 0,
        algos: Vec::new(),
        truth_error: None,
    };

    let (system, horizon) = match cfg.build_system_with(filter_cfg.epsilon, filter_cfg.dt) {
        Ok(s) => s,
        Err(e) => {
            result.truth_error = Some(e.to_string());
            return result;
        }
    };
    let mut init_rng = rng::stream(trial_seed, &[tags::INIT]);
    let x0 = filter_cfg.prior.sample(&mut init_rng);
    let truth = match systems::simulate_truth(&system, x0, horizon, filter_cfg.dt, trial_seed) {
        Ok(t) => t,
        Err(e) => {
            result.truth_error = Some(e.to_string());
            return result;
        }
    };
    result.true_transition_t = truth.first_transition_time();
    result.true_transition_step = truth.transitions.first().map(|(s, _)| *s);
    result.meas_hash = io::measurement_hash(&truth.measurements);

    let mut trial_filter_cfg = filter_cfg.clone();
    trial_filter_cfg.seed = trial_seed;
    for &alg in algorithms {
        debug_assert_eq!(io::measurement_hash(&truth.measurements), result.meas_hash);
        let run: Result<Vec<EstimateRecord>> = match alg {
            Algorithm::Spipf => filter::run(&system, &truth.measurements, &trial_filter_cfg),
            Algorithm::Spipf0 => {
                baselines::spipf_zero_control(&system, &truth.measurements, &trial_filter_cfg)
            }
            Algorithm::Sir => {
                baselines::sir_multimode_run(&system, &truth.measurements, &trial_filter_cfg)
            }
            Algorithm::Skf => baselines::skf_run(&system, &truth.measurements, &filter_cfg.prior),
        };
        result.algos.push(match run {
            Err(e) => failed_algo(alg, e.to_string()),
            Ok(estimates) => score_algo(alg, &system, &estimates, &truth),
        });
    }
    result
}

fn failed_algo(algorithm: Algorithm, error: String) -> AlgoTrialResult {
    AlgoTrialResult {
        algorithm,
        error: Some(error),
        mean_mse: f64::NAN,
        post_mean_mse: f64::NAN,
        mean_esse: f64::NAN,
        est_transition_t: None,
        offset: None,
        sq_err: Vec::new(),
        esse: Vec::new(),
        mode_correct: Vec::new(),
    }
}

fn score_algo(
    algorithm: Algorithm,
    system: &HybridSystem,
    estimates: &[EstimateRecord],
    truth: &TruthRollout,
) -> AlgoTrialResult {
    let sq_err = match metrics::squared_errors(system, estimates, truth) {
        Ok(s) => s,
        Err(e) => return failed_algo(algorithm, e.to_string()),
    };
    let mean_mse = sq_err.iter().sum::<f64>() / sq_err.len() as f64;
    let post = metrics::post_transition_mean(&sq_err, truth).unwrap_or(f64::NAN);
    let esse: Vec<f64> = estimates.iter().map(|r| r.esse).collect();
    let finite_esse: Vec<f64> = esse.iter().copied().filter(|v| v.is_finite()).collect();
    let mean_esse = if finite_esse.is_empty() {
        f64::NAN
    } else {
        finite_esse.iter().sum::<f64>() / finite_esse.len() as f64
    };
    let mm = metrics::mode_metrics(estimates, truth);
    AlgoTrialResult {
        algorithm,
        error: None,
        mean_mse,
        post_mean_mse: post,
        mean_esse,
        est_transition_t: mm.est_transition_t,
        offset: mm.offset,
        sq_err,
        esse,
        mode_correct: mm.correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
    }
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AlgoSeries {
    pub algorithm: Algorithm,
    pub times: Vec<f64>,
    pub sqerr_mean: Vec<f64>,
    pub sqerr_var: Vec<f64>,
    pub esse_mean: Vec<f64>,
    pub mode_acc: Vec<f64>,
    pub aligned_esse: Vec<(i64, f64, usize)>,
    pub aligned_mode_acc: Vec<(i64, f64, usize)>,
    pub histogram: OffsetHistogram,
}

#[derive(Debug, Clone)]
pub struct SweepGroup {
    pub value: f64,
    pub trials: Vec<TrialResult>,
    pub summary: Vec<SummaryRow>,
    pub series: Vec<AlgoSeries>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub sweep_param: String,
    pub groups: Vec<SweepGroup>,
}

impl ExperimentOutput {
    pub fn summary_for(&self, value: f64, algorithm: Algorithm) -> Option<&SummaryRow> {
        self.groups
            .iter()
            .find(|g| g.value == value || (g.value.is_nan() && value.is_nan()))?
            .summary
            .iter()
            .find(|r| r.algorithm == algorithm.name())
    }

    pub fn trial_rows(&self) -> Vec<TrialRow> {
        let mut rows = Vec::new();
        for g in &self.groups {
            for t in &g.trials {
                for a in &t.algos {
                    rows.push(TrialRow {
                        sweep_value: g.value,
                        trial: t.trial,
                        algorithm: a.algorithm.name().to_string(),
                        status: match (&t.truth_error, &a.error) {
                            (Some(e), _) | (None, Some(e)) => format!("failed: {e}"),
                            _ => "ok".into(),
                        },
                        mean_mse: a.mean_mse,
                        post_mean_mse: a.post_mean_mse,
                        mean_esse: a.mean_esse,
                        est_transition_t: a.est_transition_t.unwrap_or(f64::INFINITY),
                        true_transition_t: t.true_transition_t.unwrap_or(f64::INFINITY),
                        offset: a.offset.unwrap_or(f64::INFINITY),
                        meas_hash: t.meas_hash,
                    });
                }
            }
        }
        rows
    }
}

/// Run every (sweep value × trial × algorithm) cell; trials run in parallel
/// with isolated seed streams and are aggregated serially. Per-trial failures
/// are recorded and excluded from aggregates; more than 50% failures for an
/// algorithm in one group is an experiment error.
pub fn run_experiment(cfg: &ConfigFile) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let algorithms = cfg.algorithms();
    let n_trials = cfg.experiment.n_trials;
    let mut groups = Vec::new();

    for &value in &cfg.sweep_values() {
        let filter_cfg = if value.is_nan() { cfg.build_filter_config() } else { cfg.apply_sweep(value) };
        let trials: Vec<TrialResult> = (0..n_trials)
            .into_par_iter()
            .map(|trial| run_trial(cfg, &filter_cfg, value, trial, &algorithms))
            .collect();

        let mut summary = Vec::new();
        let mut series = Vec::new();
        for &alg in &algorithms {
            let (row, ser) = aggregate(cfg, value, alg, &trials, filter_cfg.dt)?;
            summary.push(row);
            series.push(ser);
        }
        groups.push(SweepGroup { value, trials, summary, series });
    }
    Ok(ExperimentOutput { sweep_param: cfg.experiment.sweep.clone(), groups })
}

fn aggregate(
    cfg: &ConfigFile,
    value: f64,
    alg: Algorithm,
    trials: &[TrialResult],
    dt: f64,
) -> Result<(SummaryRow, AlgoSeries)> {
    let threshold = cfg.experiment.mse_threshold.unwrap_or(f64::INFINITY);
    let mut retained_mse = Vec::new();
    let mut retained_post = Vec::new();
    let mut retained_esse = Vec::new();
    let mut sq_series: Vec<&[f64]> = Vec::new();
    let mut esse_series: Vec<&[f64]> = Vec::new();
    let mut acc_series: Vec<&[f64]> = Vec::new();
    let mut aligned_esse_series: Vec<&[f64]> = Vec::new();
    let mut aligned_acc_series: Vec<&[f64]> = Vec::new();
    let mut transition_steps = Vec::new();
    let mut offsets = Vec::new();
    let mut within_tol = 0usize;
    let mut censored = 0usize;
    let mut failed = 0usize;

    for t in trials {
        let a = match t.algos.iter().find(|a| a.algorithm == alg) {
            Some(a) => a,
            None => continue,
        };
        if t.truth_error.is_some() || a.error.is_some() {
            failed += 1;
            continue;
        }
        if !(a.mean_mse <= threshold) {
            continue; // above threshold (or NaN): excluded from aggregates
        }
        retained_mse.push(a.mean_mse);
        if a.post_mean_mse.is_finite() {
            retained_post.push(a.post_mean_mse);
        }
        if a.mean_esse.is_finite() {
            retained_esse.push(a.mean_esse);
        }
        sq_series.push(&a.sq_err);
        esse_series.push(&a.esse);
        acc_series.push(&a.mode_correct);
        offsets.push(a.offset);
        match a.offset {
            Some(o) if o.abs() <= MODE_TIMING_TOLERANCE => within_tol += 1,
            Some(_) => {}
            None => censored += 1,
        }
        if let Some(step) = t.true_transition_step {
            transition_steps.push(step);
            aligned_esse_series.push(&a.esse);
            aligned_acc_series.push(&a.mode_correct);
        }
    }

    if failed * 2 > trials.len() {
        return Err(Error::Experiment {
            context: format!(
                "{} failed {}/{} trials at sweep value {}",
                alg.name(),
                failed,
                trials.len(),
                value
            ),
        });
    }

    let (mean_mse, mse_cov) = metrics::mean_and_variance(&retained_mse);
    let (post_mean, post_cov) = metrics::mean_and_variance(&retained_post);
    let (mean_esse, _) = metrics::mean_and_variance(&retained_esse);
    let (sq_mean, _) = metrics::average_series(&sq_series);
    let sq_var = metrics::variance_series(&sq_series, &sq_mean);
    let (esse_mean, _) = metrics::average_series(&esse_series);
    let (mode_acc, _) = metrics::average_series(&acc_series);
    let n_steps = sq_mean.len();
    let times: Vec<f64> = (1..=n_steps).map(|i| i as f64 * dt).collect();
    let max_off = n_steps.saturating_sub(1);
    let aligned_esse = metrics::transition_aligned_average(
        &aligned_esse_series,
        &transition_steps,
        max_off,
        max_off,
    );
    let aligned_mode_acc = metrics::transition_aligned_average(
        &aligned_acc_series,
        &transition_steps,
        max_off,
        max_off,
    );
    let histogram = metrics::offset_histogram(&offsets, dt, MODE_TIMING_TOLERANCE + 10.0 * dt);

    let detected = retained_mse.len();
    let row = SummaryRow {
        sweep_param: cfg.experiment.sweep.clone(),
        sweep_value: value,
        algorithm: alg.name().to_string(),
        n_trials: trials.len(),
        retained: detected,
        failed,
        mean_mse,
        mse_covariance: mse_cov,
        post_mean_mse: post_mean,
        post_mse_covariance: post_cov,
        mean_esse,
        mode_within_tol_frac: if detected > 0 { within_tol as f64 / detected as f64 } else { f64::NAN },
        censored,
    };
    let ser = AlgoSeries {
        algorithm: alg,
        times,
        sqerr_mean: sq_mean,
        sqerr_var: sq_var,
        esse_mean,
        mode_acc,
        aligned_esse,
        aligned_mode_acc,
        histogram,
    };
    Ok((row, ser))
}

fn value_label(v: f64) -> String {
    if v.is_nan() {
        "default".into()
    } else {
        format!("{v}").replace('.', "p")
    }
}

/// Write all experiment outputs under `dir`: `summary.csv`, `trials.csv`, and
/// per-(algorithm, sweep value) series/aligned/histogram files.
pub fn write_experiment_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut all_rows = Vec::new();
    for g in &out.groups {
        all_rows.extend(g.summary.iter().cloned());
    }
    io::write_summary_csv(&dir.join("summary.csv"), &all_rows)?;
    io::write_trials_csv(&dir.join("trials.csv"), &out.trial_rows())?;
    for g in &out.groups {
        for s in &g.series {
            let tag = format!("{}_{}", s.algorithm.name(), value_label(g.value));
            io::write_series_csv(
                &dir.join(format!("series_{tag}.csv")),
                &s.times,
                &s.sqerr_mean,
                &s.sqerr_var,
                &s.esse_mean,
                &s.mode_acc,
            )?;
            io::write_aligned_csv(
                &dir.join(format!("aligned_{tag}.csv")),
                &s.aligned_esse,
                &s.aligned_mode_acc,
            )?;
            io::write_histogram_csv(&dir.join(format!("hist_{tag}.csv")), &s.histogram)?;
        }
    }
    Ok(())
}

/// `simulate` subcommand: one truth + measurement pair written to CSV.
pub fn simulate_command(cfg: &ConfigFile, out_dir: &Path, trial: usize) -> Result<PathBuf> {
    let filter_cfg = cfg.build_filter_config();
    let trial_seed =
        rng::derive(filter_cfg.seed, &[tags::TRIAL, trial as u64, filter_cfg.dt.to_bits()]);
    let (system, horizon) = cfg.build_system_with(filter_cfg.epsilon, filter_cfg.dt)?;
    let mut init_rng = rng::stream(trial_seed, &[tags::INIT]);
    let x0 = filter_cfg.prior.sample(&mut init_rng);
    let truth = systems::simulate_truth(&system, x0, horizon, filter_cfg.dt, trial_seed)?;
    std::fs::create_dir_all(out_dir)?;
    io::write_truth_csv(&out_dir.join("truth.csv"), &truth)?;
    io::write_measurements_csv(&out_dir.join("measurements.csv"), &truth.measurements)?;
    Ok(out_dir.join("truth.csv"))
}

/// `filter` subcommand: a single trial of one algorithm, estimates to CSV.
pub fn filter_command(
    cfg: &ConfigFile,
    algorithm: Algorithm,
    out_dir: &Path,
    trial: usize,
) -> Result<PathBuf> {
    let filter_cfg = cfg.build_filter_config();
    let result = run_trial(cfg, &filter_cfg, f64::NAN, trial, &[algorithm]);
    if let Some(e) = result.truth_error {
        return Err(Error::Experiment { context: e });
    }
    let algo = &result.algos[0];
    if let Some(e) = &algo.error {
        return Err(Error::Experiment { context: e.clone() });
    }
    // re-run to obtain the estimate records themselves for serialization
    let trial_seed =
        rng::derive(filter_cfg.seed, &[tags::TRIAL, trial as u64, filter_cfg.dt.to_bits()]);
    let (system, horizon) = cfg.build_system_with(filter_cfg.epsilon, filter_cfg.dt)?;
    let mut init_rng = rng::stream(trial_seed, &[tags::INIT]);
    let x0 = filter_cfg.prior.sample(&mut init_rng);
    let truth = systems::simulate_truth(&system, x0, horizon, filter_cfg.dt, trial_seed)?;
    let mut run_cfg = filter_cfg.clone();
    run_cfg.seed = trial_seed;
    let estimates = match algorithm {
        Algorithm::Spipf => filter::run(&system, &truth.measurements, &run_cfg)?,
        Algorithm::Spipf0 => baselines::spipf_zero_control(&system, &truth.measurements, &run_cfg)?,
        Algorithm::Sir => baselines::sir_multimode_run(&system, &truth.measurements, &run_cfg)?,
        Algorithm::Skf => baselines::skf_run(&system, &truth.measurements, &filter_cfg.prior)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("estimates_{}.csv", algorithm.name()));
    io::write_estimates_csv(&path, &estimates)?;
    io::write_truth_csv(&out_dir.join("truth.csv"), &truth)?;
    io::write_measurements_csv(&out_dir.join("measurements.csv"), &truth.measurements)?;
    Ok(path)
}

/// Recompute per-algorithm aggregate means/variances from trial rows (the
/// cross-check that summary aggregates are pure functions of the rows).
pub fn recompute_from_rows(
    rows: &[TrialRow],
    sweep_value: f64,
    algorithm: &str,
    threshold: Option<f64>,
) -> (f64, f64, usize) {
    let thr = threshold.unwrap_or(f64::INFINITY);
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| {
            (r.sweep_value == sweep_value || (r.sweep_value.is_nan() && sweep_value.is_nan()))
                && r.algorithm == algorithm
                && r.status == "ok"
                && r.mean_mse <= thr
        })
        .map(|r| r.mean_mse)
        .collect();
    let (m, v) = metrics::mean_and_variance(&vals);
    (m, v, vals.len())
}

/// Group trial rows by trial index for paired comparisons.
pub fn rows_by_trial<'a>(
    rows: &'a [TrialRow],
    sweep_value: f64,
    algorithm: &str,
) -> BTreeMap<usize, &'a TrialRow> {
    rows.iter()
        .filter(|r| {
            (r.sweep_value == sweep_value || (r.sweep_value.is_nan() && sweep_value.is_nan()))
                && r.algorithm == algorithm
        })
        .map(|r| (r.trial, r))
        .collect()
}
