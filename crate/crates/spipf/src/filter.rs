//! Salted path integral particle filtering.
//!
//! Per measurement step the filter forms the sliding window
//! `[max(0, t_j − H·dt), t_j]`, solves the window's control problem for
//! feedforward/feedback gains around the prior-weighted nominal, rolls every
//! particle out under those gains with its own counter-based noise stream,
//! and scores it with `exp(−S_u)`. Filtered weights drive mode voting for the
//! estimate; the first rollout step becomes the next window's prior sample.
//! All weight arithmetic is in log space with log-sum-exp normalization.

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::cost::{CostEvaluator, MeasurementPath};
use crate::error::{Error, Result};
use crate::hybrid::{HybridState, HybridSystem, ModeId};
use crate::ilqr::{
    rollout_controlled_with, solve_window, zero_gain_schedule, GainSchedule, IlqrSettings,
    ResolvedReference,
};
use crate::rng::{self, tags};

/// Per-mode Gaussian component of the initial-state distribution.
#[derive(Debug, Clone)]
pub struct PriorMode {
    pub mode: ModeId,
    pub prob: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub aux: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub modes: Vec<PriorMode>,
}

impl PriorSpec {
    /// Single-mode Gaussian prior.
    pub fn gaussian(mode: ModeId, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { modes: vec![PriorMode { mode, prob: 1.0, mean, cov, aux: Vec::new() }] }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> HybridState {
        let total: f64 = self.modes.iter().map(|m| m.prob).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = &self.modes[self.modes.len() - 1];
        for m in &self.modes {
            if pick < m.prob {
                chosen = m;
                break;
            }
            pick -= m.prob;
        }
        let n = chosen.mean.len();
        let sqrt_cov = psd_sqrt(&chosen.cov);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        HybridState {
            mode: chosen.mode,
            x: &chosen.mean + sqrt_cov * z,
            t: 0.0,
            aux: chosen.aux.clone(),
        }
    }

    /// Component with the highest probability (for single-Gaussian consumers).
    pub fn dominant(&self) -> &PriorMode {
        self.modes
            .iter()
            .max_by(|a, b| a.prob.partial_cmp(&b.prob).unwrap())
            .expect("prior must have at least one mode")
    }
}

/// Symmetric PSD square root via eigendecomposition, tolerating tiny negative
/// eigenvalues (clamped to zero) so point-mass and degenerate priors work.
fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Particle count K.
    pub k: usize,
    /// Sliding-window length H in steps.
    pub h: usize,
    pub dt: f64,
    /// Process-noise scale ε; must match the system's.
    pub epsilon: f64,
    /// Resampling threshold on the effective ratio γ.
    pub gamma_thres: f64,
    pub resampling_enabled: bool,
    pub prior: PriorSpec,
    pub seed: u64,
    pub ilqr: IlqrSettings,
    pub record_particles: bool,
}

impl FilterConfig {
    pub fn new(prior: PriorSpec) -> Self {
        Self {
            k: 50,
            h: 10,
            dt: 0.01,
            epsilon: 0.1,
            gamma_thres: 0.5,
            resampling_enabled: true,
            prior,
            seed: 0,
            ilqr: IlqrSettings::default(),
            record_particles: false,
        }
    }

    fn validate(&self, system: &HybridSystem, path: &MeasurementPath) -> Result<()> {
        if self.k == 0 || self.h == 0 || self.dt <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config { context: "K ≥ 1, H ≥ 1, dt > 0, ε > 0 required".into() });
        }
        if path.n_steps() == 0 {
            return Err(Error::Config { context: "measurement path is empty".into() });
        }
        if (path.dt(0) - self.dt).abs() > 1e-9 {
            return Err(Error::Config {
                context: format!("config dt {} does not match measurement grid {}", self.dt, path.dt(0)),
            });
        }
        if (system.noise_scale - self.epsilon).abs() > 1e-12 {
            return Err(Error::Config {
                context: "config epsilon must match the system's noise scale".into(),
            });
        }
        Ok(())
    }
}

/// One particle of the ensemble: end-of-window filtering sample, the prior
/// sample anchoring the next window, and both log-weights.
#[derive(Debug, Clone)]
pub struct Particle {
    pub state: DVector<f64>,
    pub mode: ModeId,
    pub aux: Vec<f64>,
    pub prior_state: DVector<f64>,
    pub prior_mode: ModeId,
    pub prior_aux: Vec<f64>,
    /// log w̃ (normalized across the ensemble).
    pub log_w_prior: f64,
    /// log ŵ (normalized across the ensemble); `-inf` marks a dead particle.
    pub log_w_filtered: f64,
    pub trajectory: Vec<DVector<f64>>,
    pub mode_history: Vec<ModeId>,
    /// S_u over the last window and over its first step, kept for the
    /// resampling weight bookkeeping.
    su_full: f64,
    su_first: f64,
}

impl Particle {
    /// A fresh particle at a sampled prior state with the given log-weight.
    pub fn fresh(state: HybridState, log_w: f64) -> Self {
        Self {
            state: state.x.clone(),
            mode: state.mode,
            aux: state.aux.clone(),
            prior_state: state.x,
            prior_mode: state.mode,
            prior_aux: state.aux,
            log_w_prior: log_w,
            log_w_filtered: log_w,
            trajectory: Vec::new(),
            mode_history: Vec::new(),
            su_full: 0.0,
            su_first: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParticleSnapshot {
    pub mode: ModeId,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateRecord {
    pub t: f64,
    pub x_hat: DVector<f64>,
    pub aux_hat: Vec<f64>,
    pub mode_hat: ModeId,
    /// Effective ratio γ = 1/(K Σ ŵ²) over the full ensemble.
    pub esse: f64,
    pub per_particle: Option<Vec<ParticleSnapshot>>,
}

/// Run the filter over the full measurement path, one estimate per step.
pub fn run(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    config: &FilterConfig,
) -> Result<Vec<EstimateRecord>> {
    run_with_options(system, measurements, config, false)
}

/// `zero_control = true` forces `k_ff ≡ 0, K_fb ≡ 0` in every window (the
/// SPIPF-0 ablation); everything else is unchanged.
pub fn run_with_options(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    config: &FilterConfig,
    zero_control: bool,
) -> Result<Vec<EstimateRecord>> {
    config.validate(system, measurements)?;
    let l = measurements.n_steps();
    let mut particles = init_particles(config);
    let mut records = Vec::with_capacity(l);
    for j in 1..=l {
        step_window(system, measurements, j, &mut particles, config, zero_control)?;
        let mut rec = vote_and_estimate(&particles)?;
        rec.t = measurements.times[j];
        if config.record_particles {
            rec.per_particle = Some(
                particles
                    .iter()
                    .map(|p| ParticleSnapshot { mode: p.mode, weight: p.log_w_filtered.exp() })
                    .collect(),
            );
        }
        records.push(rec);
    }
    Ok(records)
}

fn init_particles(config: &FilterConfig) -> Vec<Particle> {
    let log_uniform = -(config.k as f64).ln();
    (0..config.k)
        .map(|k| {
            let mut rng = rng::stream(config.seed, &[tags::PRIOR, k as u64]);
            Particle::fresh(config.prior.sample(&mut rng), log_uniform)
        })
        .collect()
}

/// One step of the filter: solve the window's gains, update every particle,
/// normalize both weight sets, and resample the prior pool when the effective
/// ratio drops below the threshold.
pub fn step_window(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    j: usize,
    particles: &mut Vec<Particle>,
    config: &FilterConfig,
    zero_control: bool,
) -> Result<()> {
    let i0 = j.saturating_sub(config.h);
    let eval = CostEvaluator::new(system, measurements, i0, j)?;
    let init = nominal_init_state(particles, measurements.times[i0])?;

    let gains = if zero_control {
        zero_gain_schedule(system, &eval, &init)?
    } else {
        match solve_window(system, &eval, &init, &config.ilqr) {
            Ok(g) => g,
            Err(Error::SolverStalled { schedule, reg }) => {
                log::warn!("window {j}: solver stalled at reg={reg:.1e}, using carried schedule");
                *schedule
            }
            Err(e) => {
                return Err(Error::FilterFailure { step: j, context: format!("iLQR failed: {e}") })
            }
        }
    };
    let resolved = ResolvedReference::new(system, &gains);

    // the prior pool advances one step only when the window start does
    let advance = j >= config.h;
    let seed = config.seed;
    let updated: Vec<Particle> = particles
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut stream = rng::stream(seed, &[tags::PARTICLE, k as u64, j as u64]);
            particle_update(p, &gains, &resolved, &eval, system, advance, &mut stream)
        })
        .collect();
    *particles = updated;

    normalize_filtered(particles, j)?;
    normalize_prior(particles);

    let gamma = effective_ratio(particles);
    if config.resampling_enabled && gamma < config.gamma_thres {
        resample_prior_pool(particles, config.seed, j);
    }
    Ok(())
}

/// Prior-weighted nominal for the window solve: the mode carrying the most
/// prior weight, and the weighted mean of that mode's prior samples.
fn nominal_init_state(particles: &[Particle], t0: f64) -> Result<HybridState> {
    let weights: Vec<f64> = particles.iter().map(|p| p.log_w_prior.exp()).collect();
    let mode = vote_mode(particles.iter().map(|p| p.prior_mode).zip(weights.iter().copied()))?;
    let mut total = 0.0;
    let mut mean: Option<DVector<f64>> = None;
    let mut aux_mean: Option<Vec<f64>> = None;
    for (p, &w) in particles.iter().zip(&weights) {
        if p.prior_mode != mode || w == 0.0 {
            continue;
        }
        total += w;
        match &mut mean {
            Some(m) => *m += w * &p.prior_state,
            None => mean = Some(w * &p.prior_state),
        }
        match &mut aux_mean {
            Some(a) => {
                for (ai, v) in a.iter_mut().zip(&p.prior_aux) {
                    *ai += w * v;
                }
            }
            None => aux_mean = Some(p.prior_aux.iter().map(|v| w * v).collect()),
        }
    }
    let mean = mean.ok_or(Error::DegenerateEnsemble { step: 0 })? / total;
    let aux = aux_mean.unwrap_or_default().iter().map(|v| v / total).collect();
    Ok(HybridState { mode, x: mean, t: t0, aux })
}

/// Roll a particle out over the window under the gains, score it with
/// `exp(−S_u)`, and stage the next window's prior sample from the first step.
/// A failed rollout marks the particle dead (weight zero) instead of aborting
/// the ensemble.
pub fn particle_update(
    p: &Particle,
    gains: &GainSchedule,
    resolved: &ResolvedReference,
    eval: &CostEvaluator,
    system: &HybridSystem,
    advance: bool,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Particle {
    let mut next = p.clone();
    let x0 = HybridState {
        mode: p.prior_mode,
        x: p.prior_state.clone(),
        t: eval.time(eval.start),
        aux: p.prior_aux.clone(),
    };
    let rollout = match rollout_controlled_with(system, gains, resolved, &x0, Some(stream)) {
        Ok(r) => r,
        Err(_) => {
            next.log_w_filtered = f64::NEG_INFINITY;
            return next;
        }
    };
    let n = rollout.controls.len();
    let terms = match eval.su_terms(&rollout.states, &rollout.modes[..n], &rollout.controls, &rollout.noises)
    {
        Ok(t) => t,
        Err(_) => {
            next.log_w_filtered = f64::NEG_INFINITY;
            return next;
        }
    };
    let su_full: f64 = terms.iter().sum();
    let su_first = terms[0];
    if !su_full.is_finite() {
        next.log_w_filtered = f64::NEG_INFINITY;
        return next;
    }
    if su_full.abs() > 20.0 && std::env::var("SPIPF_DEBUG_SU").is_ok() {
        eprintln!(
            "SU OUTLIER su={su_full:+.2} terms={terms:?}\n  states={:?}\n  controls={:?}\n  noises={:?}",
            rollout.states.iter().map(|x| x[0]).collect::<Vec<_>>(),
            rollout.controls.iter().map(|u| u[0]).collect::<Vec<_>>(),
            rollout.noises.iter().map(|w| w[0]).collect::<Vec<_>>(),
        );
    }

    next.log_w_filtered = p.log_w_prior - su_full;
    next.su_full = su_full;
    next.su_first = su_first;
    next.state = rollout.states[n].clone();
    next.mode = rollout.modes[n];
    next.aux = rollout.aux[n].clone();
    next.trajectory = rollout.states;
    next.mode_history = rollout.modes;
    if advance {
        next.prior_state = next.trajectory[1].clone();
        next.prior_mode = next.mode_history[1];
        next.prior_aux = rollout.aux[1].clone();
        next.log_w_prior = p.log_w_prior - su_first;
    }
    next
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_filtered(particles: &mut [Particle], step: usize) -> Result<()> {
    let lse = log_sum_exp(particles.iter().map(|p| p.log_w_filtered));
    if lse == f64::NEG_INFINITY || !lse.is_finite() {
        return Err(Error::DegenerateEnsemble { step });
    }
    for p in particles.iter_mut() {
        p.log_w_filtered -= lse;
    }
    Ok(())
}

fn normalize_prior(particles: &mut [Particle]) {
    let lse = log_sum_exp(particles.iter().map(|p| p.log_w_prior));
    if lse.is_finite() {
        for p in particles.iter_mut() {
            p.log_w_prior -= lse;
        }
    }
}

/// γ = 1/(K Σ ŵ²) from the normalized filtered weights.
pub fn effective_ratio(particles: &[Particle]) -> f64 {
    let sum_sq: f64 = particles.iter().map(|p| p.log_w_filtered.exp().powi(2)).sum();
    1.0 / (particles.len() as f64 * sum_sq)
}

/// Multinomial resampling of the *prior pool* with the filtered weights; the
/// refreshed prior weights are set proportional to `exp(+S_u)` of the drawn
/// ancestor (the importance correction that keeps the pool targeting the
/// prior), and modes follow the resampled states.
fn resample_prior_pool(particles: &mut [Particle], seed: u64, j: usize) {
    let mut rng = rng::stream(seed, &[tags::RESAMPLE, j as u64]);
    let weights: Vec<f64> = particles.iter().map(|p| p.log_w_filtered.exp()).collect();
    let dist = match WeightedIndex::new(&weights) {
        Ok(d) => d,
        Err(_) => return, // all-zero weights already surfaced as degenerate
    };
    let ancestors: Vec<usize> = (0..particles.len()).map(|_| dist.sample(&mut rng)).collect();
    let source: Vec<(DVector<f64>, ModeId, Vec<f64>, f64)> = ancestors
        .iter()
        .map(|&a| {
            let p = &particles[a];
            (p.prior_state.clone(), p.prior_mode, p.prior_aux.clone(), p.su_full)
        })
        .collect();
    for (p, (xs, mode, aux, su)) in particles.iter_mut().zip(source) {
        p.prior_state = xs;
        p.prior_mode = mode;
        p.prior_aux = aux;
        p.log_w_prior = su; // ∝ exp(+S_u), normalized below
    }
    normalize_prior(particles);
}

fn vote_mode(items: impl Iterator<Item = (ModeId, f64)>) -> Result<ModeId> {
    let mut totals: Vec<(ModeId, f64)> = Vec::new();
    for (mode, w) in items {
        match totals.iter_mut().find(|(m, _)| *m == mode) {
            Some((_, t)) => *t += w,
            None => totals.push((mode, w)),
        }
    }
    totals.sort_by_key(|(m, _)| *m);
    totals
        .into_iter()
        .fold(None::<(ModeId, f64)>, |best, (m, w)| match best {
            Some((bm, bw)) if bw >= w => Some((bm, bw)),
            _ => Some((m, w)),
        })
        .map(|(m, _)| m)
        .ok_or(Error::DegenerateEnsemble { step: 0 })
}

/// Mode voting and state estimation: the mode with the greatest summed
/// filtered weight wins (ties break to the lower index), its particles'
/// weights are renormalized to sum to one, and the estimate is their weighted
/// mean. γ is computed over the full ensemble.
pub fn vote_and_estimate(particles: &[Particle]) -> Result<EstimateRecord> {
    let weights: Vec<f64> = particles.iter().map(|p| p.log_w_filtered.exp()).collect();
    let mode = vote_mode(particles.iter().map(|p| p.mode).zip(weights.iter().copied()))?;
    let mut total = 0.0;
    let mut mean: Option<DVector<f64>> = None;
    let mut aux_mean: Option<Vec<f64>> = None;
    for (p, &w) in particles.iter().zip(&weights) {
        if p.mode != mode {
            continue;
        }
        total += w;
        match &mut mean {
            Some(m) => *m += w * &p.state,
            None => mean = Some(w * &p.state),
        }
        match &mut aux_mean {
            Some(a) => {
                for (ai, v) in a.iter_mut().zip(&p.aux) {
                    *ai += w * v;
                }
            }
            None => aux_mean = Some(p.aux.iter().map(|v| w * v).collect()),
        }
    }
    let x_hat = mean.ok_or(Error::DegenerateEnsemble { step: 0 })? / total;
    let aux_hat: Vec<f64> = aux_mean.unwrap_or_default().iter().map(|v| v / total).collect();
    Ok(EstimateRecord {
        t: 0.0,
        x_hat,
        aux_hat,
        mode_hat: mode,
        esse: effective_ratio(particles),
        per_particle: None,
    })
}


/// Test/diagnostic hook: the initial prior ensemble.
#[doc(hidden)]
pub fn debug_init_particles(config: &FilterConfig) -> Vec<Particle> {
    init_particles(config)
}

impl Particle {
    /// Diagnostic access to the window path-cost bookkeeping.
    #[doc(hidden)]
    pub fn debug_su(&self) -> (f64, f64) {
        (self.su_full, self.su_first)
    }
}
