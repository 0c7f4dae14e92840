//! Reference estimators: the salted Kalman filter used as the Gaussian-case
//! posterior oracle, a bootstrap multi-mode SIR particle filter, and the
//! zero-control ablation of the main filter.
//!
//! All three consume the same [`MeasurementPath`] objects and RNG stream
//! conventions as the main filter, so comparisons differ only in algorithm.
//! The SKF is exact only for linear flows; for nonlinear benchmarks it is an
//! oracle posterior approximation, not the true posterior.

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;

use crate::cost::MeasurementPath;
use crate::error::{Error, Result};
use crate::filter::{
    run_with_options, vote_and_estimate, EstimateRecord, FilterConfig, Particle, PriorSpec,
};
use crate::hybrid::{HybridState, HybridSystem, ModeId};
use crate::rng::{self, tags};
use crate::systems::sample_wiener;

/// Gaussian belief over one mode's state space.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mode: ModeId,
    pub aux: Vec<f64>,
}

impl GaussianBelief {
    pub fn from_prior(prior: &PriorSpec) -> Self {
        let m = prior.dominant();
        Self { mean: m.mean.clone(), cov: m.cov.clone(), mode: m.mode, aux: m.aux.clone() }
    }
}

/// One salted-Kalman step: EKF predict with the mode's drift Jacobian and
/// process covariance `ε σσᵀ dt`; if the predicted mean crosses a guard, the
/// reset is applied to the mean and the covariance pushed through the
/// saltation matrix (`P⁺ = Ξ P Ξᵀ`); then an EKF update against the
/// increment-rate measurement `ΔY/Δt` with noise `σ_B²/dt`.
pub fn skf_step(
    system: &HybridSystem,
    belief: &GaussianBelief,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<GaussianBelief> {
    let mode = system.mode(belief.mode);
    let u = DVector::zeros(mode.noise_dim);
    let nx = belief.mean.len();

    // predict
    let drift = mode.drift(t, &belief.mean, &u);
    let (a, _) = mode.flow_jacobians(t, &belief.mean, &u)?;
    let phi = DMatrix::identity(nx, nx) + a * dt;
    let sigma = mode.diffusion(t, &belief.mean);
    let mut mean = &belief.mean + drift * dt;
    let mut cov = &phi * &belief.cov * phi.transpose()
        + &sigma * sigma.transpose() * (system.noise_scale * dt);
    let mut mode_id = belief.mode;
    let mut aux = belief.aux.clone();
    let t_next = t + dt;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence { context: format!("SKF mean at t={t_next}") });
    }

    // guard crossing of the mean
    let active: Vec<usize> = system
        .outgoing(mode_id)
        .iter()
        .copied()
        .filter(|&i| system.transition(i).guard(t_next, &mean) <= 0.0)
        .collect();
    match active.len() {
        0 => {}
        1 => {
            let idx = active[0];
            let xi = system.saltation_matrix(idx, t_next, &mean, &aux, &u)?;
            let (mean_post, aux_post) = system.transition(idx).reset(t_next, &mean, &aux);
            cov = &xi * cov * xi.transpose();
            mean = mean_post;
            aux = aux_post;
            mode_id = system.transition(idx).to;
        }
        n => return Err(Error::MultipleGuards { t: t_next, mode: mode_id, count: n }),
    }

    // update with the rate observation
    let obs = system.observation(mode_id);
    let h = obs.eval(t_next, &mean);
    let hx = obs.jacobian(t_next, &mean);
    let p = h.len();
    let r = DMatrix::identity(p, p) * (system.obs_noise_sigma(mode_id).powi(2) / dt);
    let innovation = dy / dt - h;
    let s = &hx * &cov * hx.transpose() + &r;
    let s_inv = s.try_inverse().ok_or_else(|| Error::NumericalDivergence {
        context: "singular innovation covariance in SKF update".into(),
    })?;
    let gain = &cov * hx.transpose() * s_inv;
    mean += &gain * innovation;
    let nx = mean.len();
    let ikh = DMatrix::identity(nx, nx) - &gain * &hx;
    cov = &ikh * cov * ikh.transpose() + &gain * r * gain.transpose();
    cov = (&cov + cov.transpose()) * 0.5;

    // PSD repair: clamp tiny negative eigenvalues, fail beyond tolerance
    let scale = cov.amax().max(1.0);
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-8 * scale {
        return Err(Error::NumericalDivergence {
            context: format!("SKF covariance lost PSD (λ_min = {min_eig:.3e})"),
        });
    }
    if min_eig < 0.0 {
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    }
    Ok(GaussianBelief { mean, cov, mode: mode_id, aux })
}

/// Run the SKF over a measurement path. ESSE is undefined for a Kalman
/// filter and is recorded as NaN.
pub fn skf_run(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    prior: &PriorSpec,
) -> Result<Vec<EstimateRecord>> {
    let mut belief = GaussianBelief::from_prior(prior);
    let mut records = Vec::with_capacity(measurements.n_steps());
    for i in 0..measurements.n_steps() {
        belief = skf_step(
            system,
            &belief,
            &measurements.increments[i],
            measurements.times[i],
            measurements.dt(i),
        )?;
        records.push(EstimateRecord {
            t: measurements.times[i + 1],
            x_hat: belief.mean.clone(),
            aux_hat: belief.aux.clone(),
            mode_hat: belief.mode,
            esse: f64::NAN,
            per_particle: None,
        });
    }
    Ok(records)
}

/// One bootstrap SIR step: weight-multiply each particle by the Gaussian
/// likelihood of `ΔY_i` given its current state, normalize, resample below
/// `gamma_thres`, then propagate one uncontrolled noisy hybrid step. SIR
/// always resamples on threshold (the `resampling_enabled` switch governs the
/// main filter only).
pub fn sir_multimode_step(
    system: &HybridSystem,
    particles: &mut Vec<Particle>,
    dy: &DVector<f64>,
    t: f64,
    dt: f64,
    config: &FilterConfig,
    step_index: usize,
) -> Result<()> {
    // measurement update at the left point
    for p in particles.iter_mut() {
        let obs = system.observation(p.mode);
        let h = obs.eval(t, &p.state);
        let s2 = system.obs_noise_sigma(p.mode).powi(2) * dt;
        let p_dim = h.len() as f64;
        let resid = dy - h * dt;
        let log_lik = -0.5 * resid.norm_squared() / s2
            - 0.5 * p_dim * (2.0 * std::f64::consts::PI * s2).ln();
        p.log_w_filtered += log_lik;
    }
    let lse = log_sum_exp(particles.iter().map(|p| p.log_w_filtered));
    if !lse.is_finite() {
        return Err(Error::DegenerateEnsemble { step: step_index });
    }
    for p in particles.iter_mut() {
        p.log_w_filtered -= lse;
    }

    // resample on effective-ratio threshold
    let gamma = crate::filter::effective_ratio(particles);
    if gamma < config.gamma_thres {
        let mut rng = rng::stream(config.seed, &[tags::RESAMPLE, tags::TRIAL, step_index as u64]);
        let weights: Vec<f64> = particles.iter().map(|p| p.log_w_filtered.exp()).collect();
        if let Ok(dist) = WeightedIndex::new(&weights) {
            let ancestors: Vec<usize> =
                (0..particles.len()).map(|_| dist.sample(&mut rng)).collect();
            let source: Vec<Particle> = ancestors.iter().map(|&a| particles[a].clone()).collect();
            let log_uniform = -(particles.len() as f64).ln();
            for (slot, mut src) in particles.iter_mut().zip(source) {
                src.log_w_filtered = log_uniform;
                *slot = src;
            }
        }
    }

    // propagate uncontrolled
    for (k, p) in particles.iter_mut().enumerate() {
        let mut stream =
            rng::stream(config.seed, &[tags::PARTICLE, k as u64, step_index as u64]);
        let nd = system.mode(p.mode).noise_dim;
        let dw = sample_wiener(&mut stream, nd, dt);
        let s = HybridState { mode: p.mode, x: p.state.clone(), t, aux: p.aux.clone() };
        match system.step(&s, &DVector::zeros(nd), dt, &dw) {
            Ok((next, _)) => {
                p.state = next.x;
                p.mode = next.mode;
                p.aux = next.aux;
            }
            Err(_) => p.log_w_filtered = f64::NEG_INFINITY,
        }
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multi-mode SIR particle filter over a full path, with the same voting
/// logic as the main filter.
pub fn sir_multimode_run(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    config: &FilterConfig,
) -> Result<Vec<EstimateRecord>> {
    let log_uniform = -(config.k as f64).ln();
    let mut particles: Vec<Particle> = (0..config.k)
        .map(|k| {
            let mut rng = rng::stream(config.seed, &[tags::PRIOR, k as u64]);
            Particle::fresh(config.prior.sample(&mut rng), log_uniform)
        })
        .collect();
    let mut records = Vec::with_capacity(measurements.n_steps());
    for i in 0..measurements.n_steps() {
        sir_multimode_step(
            system,
            &mut particles,
            &measurements.increments[i],
            measurements.times[i],
            measurements.dt(i),
            config,
            i,
        )?;
        let mut rec = vote_and_estimate(&particles)?;
        rec.t = measurements.times[i + 1];
        records.push(rec);
    }
    Ok(records)
}

/// SPIPF with the gain schedule forced to zero in every window; weights,
/// windows, and voting are unchanged.
pub fn spipf_zero_control(
    system: &HybridSystem,
    measurements: &MeasurementPath,
    config: &FilterConfig,
) -> Result<Vec<EstimateRecord>> {
    run_with_options(system, measurements, config, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{linear_1d, simulate_truth, bouncing_ball, BouncingBallParams};
    use approx::assert_relative_eq;

    /// Textbook predict-then-update Kalman filter on the rate observation,
    /// mirroring the SKF's conventions exactly.
    fn kf_oracle_step(
        a: f64,
        sigma: f64,
        eps: f64,
        sigma_b: f64,
        dt: f64,
        mean: f64,
        var: f64,
        dy: f64,
    ) -> (f64, f64) {
        let phi = 1.0 + a * dt;
        let mean_p = mean + a * mean * dt;
        let var_p = phi * phi * var + eps * sigma * sigma * dt;
        let r = sigma_b * sigma_b / dt;
        let s = var_p + r;
        let k = var_p / s;
        let mean_u = mean_p + k * (dy / dt - mean_p);
        let var_u = (1.0 - k) * (1.0 - k) * var_p + k * k * r;
        (mean_u, var_u)
    }

    #[test]
    fn skf_equals_closed_form_kf_on_linear_system() {
        let (a, sigma, eps, sigma_b, dt) = (-0.5, 1.0, 0.1, 0.2, 0.01);
        let sys = linear_1d(a, sigma, eps, sigma_b);
        let truth = simulate_truth(
            &sys,
            HybridState::new(ModeId(0), DVector::from_vec(vec![1.0]), 0.0),
            1.0,
            dt,
            7,
        )
        .unwrap();
        let mut belief = GaussianBelief {
            mean: DVector::from_vec(vec![0.7]),
            cov: DMatrix::from_element(1, 1, 0.25),
            mode: ModeId(0),
            aux: vec![],
        };
        let (mut m, mut v) = (0.7, 0.25);
        for i in 0..truth.measurements.n_steps() {
            belief = skf_step(
                &sys,
                &belief,
                &truth.measurements.increments[i],
                truth.measurements.times[i],
                dt,
            )
            .unwrap();
            let (mu, vu) =
                kf_oracle_step(a, sigma, eps, sigma_b, dt, m, v, truth.measurements.increments[i][0]);
            m = mu;
            v = vu;
            assert!((belief.mean[0] - m).abs() < 1e-10, "step {i} mean");
            assert!((belief.cov[(0, 0)] - v).abs() < 1e-10, "step {i} var");
        }
    }

    #[test]
    fn identity_reset_transition_leaves_covariance_continuous() {
        // apex crossing of the bouncing ball: Ξ = I, so the jump contributes
        // nothing beyond the smooth predict/update
        let sys = bouncing_ball(&BouncingBallParams::default());
        let dt = 0.01;
        let belief = GaussianBelief {
            mean: DVector::from_vec(vec![0.5, 0.004]), // rising, about to cross apex
            cov: DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.02]),
            mode: ModeId(1),
            aux: vec![],
        };
        let dy = DVector::zeros(2);
        let next = skf_step(&sys, &belief, &dy, 0.0, dt).unwrap();
        assert_eq!(next.mode, ModeId(0), "apex crossed");

        // same arithmetic on a guardless twin must give the identical covariance
        let twin = crate::systems::double_integrator(0.1, 0.1);
        let belief_twin = GaussianBelief {
            mean: belief.mean.clone() ,
            cov: belief.cov.clone(),
            mode: ModeId(0),
            aux: vec![],
        };
        // twin has drift [v, u] (no gravity); emulate gravity via the ball's
        // own mode-1 dynamics by comparing against a manual predict/update
        drop(twin);
        let mode = sys.mode(ModeId(1));
        let u = DVector::zeros(1);
        let (a, _) = mode.flow_jacobians(0.0, &belief.mean, &u).unwrap();
        let phi = DMatrix::identity(2, 2) + a * dt;
        let sigma = mode.diffusion(0.0, &belief.mean);
        let cov_pred =
            &phi * &belief.cov * phi.transpose() + &sigma * sigma.transpose() * (0.1 * dt);
        let hx = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2) * (0.01 / dt);
        let s = &hx * &cov_pred * hx.transpose() + &r;
        let gain = &cov_pred * hx.transpose() * s.try_inverse().unwrap();
        let ikh = DMatrix::identity(2, 2) - &gain * &hx;
        let cov_manual = &ikh * cov_pred * ikh.transpose() + &gain * r * gain.transpose();
        assert!((next.cov - cov_manual).amax() < 1e-12);
        drop(belief_twin);
    }

    #[test]
    fn sir_identical_particles_keep_uniform_weights() {
        // point-mass prior and (numerically) no process noise: the ensemble
        // stays identical, so every likelihood update leaves weights uniform
        let sys = crate::systems::bouncing_ball_with(&BouncingBallParams::default(), 1e-18, 0.1);
        let prior = PriorSpec::gaussian(
            ModeId(0),
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::zeros(2, 2),
        );
        let mut cfg = FilterConfig::new(prior);
        cfg.k = 10;
        cfg.epsilon = 1e-18;
        let truth = simulate_truth(
            &sys,
            HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0),
            0.1,
            0.01,
            3,
        )
        .unwrap();
        let recs = sir_multimode_run(&sys, &truth.measurements, &cfg).unwrap();
        for r in &recs {
            assert_relative_eq!(r.esse, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sir_concentrates_weight_on_exact_particle_in_low_noise_limit() {
        // one particle pinned on the truth, measurement noise near zero:
        // its relative weight converges to 1 after the first update
        let sigma_b = 1e-5;
        let sys = crate::systems::bouncing_ball_with(
            &BouncingBallParams::default(),
            1e-12,
            sigma_b,
        );
        let x0 = HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0);
        let truth = simulate_truth(&sys, x0.clone(), 0.05, 0.01, 5).unwrap();
        let log_uniform = -(2.0f64).ln();
        let mk = |x: DVector<f64>| {
            Particle::fresh(HybridState::new(ModeId(0), x, 0.0), log_uniform)
        };
        let mut particles = vec![mk(x0.x.clone()), mk(DVector::from_vec(vec![1.3, 0.0]))];
        let mut cfg = FilterConfig::new(PriorSpec::gaussian(
            ModeId(0),
            x0.x.clone(),
            DMatrix::zeros(2, 2),
        ));
        cfg.epsilon = 1e-12;
        cfg.gamma_thres = 0.0; // disable resampling for the check
        sir_multimode_step(
            &sys,
            &mut particles,
            &truth.measurements.increments[0].clone(),
            0.0,
            0.01,
            &cfg,
            0,
        )
        .unwrap();
        assert!(particles[0].log_w_filtered.exp() > 0.999999);
    }

    #[test]
    fn spipf0_matches_spipf_when_control_cost_dominates() {
        // ε -> 0 makes the control penalty (1/2ε)‖u‖² overwhelming, so the
        // solver returns (numerically) zero controls and both variants agree
        let eps = 1e-9;
        let sys = crate::systems::bouncing_ball_with(&BouncingBallParams::default(), eps, 0.1);
        let x0 = HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0);
        let truth = simulate_truth(&sys, x0.clone(), 0.2, 0.01, 9).unwrap();
        let mut cfg = FilterConfig::new(PriorSpec::gaussian(
            ModeId(0),
            x0.x.clone(),
            DMatrix::zeros(2, 2),
        ));
        cfg.k = 8;
        cfg.epsilon = eps;
        let a = crate::filter::run(&sys, &truth.measurements, &cfg).unwrap();
        let b = spipf_zero_control(&sys, &truth.measurements, &cfg).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert!((&ra.x_hat - &rb.x_hat).amax() < 1e-6);
            assert_eq!(ra.mode_hat, rb.mode_hat);
        }
    }
}
