//! Observation paths and filtering costs.
//!
//! Measurements are stored as discretized increments `ΔY_i = h(t_i, x_i)Δt +
//! σ_B ΔB_i` on the truth grid. All cost evaluation goes through the
//! integrated-by-parts per-step form
//! `(1/σ_B²)(½‖h‖²Δt − h·ΔY)`, which needs no differencing of `h` along
//! rollouts; its equivalence with the literal `∫Y dh − Y_T h_T` form is a
//! tested invariant, not an assumption. The path cost `S_u` adds the control
//! effort and control–noise coupling terms, and `exp(−S_u)` is the
//! unnormalized particle weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hybrid::{HybridState, HybridSystem, ModeId};

/// Discretized observation path. `increments[i]` covers `[times[i], times[i+1])`
/// and was generated from the truth state at the left endpoint. `mode_labels`
/// records the generator's mode per step for diagnostics only; filters never
/// read it.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPath {
    pub times: Vec<f64>,
    pub increments: Vec<DVector<f64>>,
    /// Observation noise intensity per mode, recorded at generation.
    pub sigma_b: Vec<f64>,
    pub mode_labels: Vec<ModeId>,
    pub obs_dim: usize,
}

impl MeasurementPath {
    pub fn new(
        times: Vec<f64>,
        increments: Vec<DVector<f64>>,
        sigma_b: Vec<f64>,
        mode_labels: Vec<ModeId>,
    ) -> Result<Self> {
        if !times.is_empty() && increments.len() + 1 != times.len() {
            return Err(Error::Shape {
                what: format!(
                    "measurement path needs len(dY)=len(times)-1, got {} and {}",
                    increments.len(),
                    times.len()
                ),
            });
        }
        if increments.iter().flat_map(|v| v.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape { what: "non-finite measurement increment".into() });
        }
        if mode_labels.len() != increments.len() {
            return Err(Error::Shape { what: "one mode label per increment required".into() });
        }
        let obs_dim = increments.first().map(|v| v.len()).unwrap_or(0);
        if increments.iter().any(|v| v.len() != obs_dim) {
            return Err(Error::Shape { what: "ragged measurement increments".into() });
        }
        Ok(Self { times, increments, sigma_b, mode_labels, obs_dim })
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// Reconstruct `Y_t` by cumulative summation with `Y_0 = 0`.
    pub fn cumulative(&self) -> Vec<DVector<f64>> {
        let mut y = Vec::with_capacity(self.increments.len() + 1);
        y.push(DVector::zeros(self.obs_dim));
        for dy in &self.increments {
            let last: &DVector<f64> = y.last().unwrap();
            y.push(last + dy);
        }
        y
    }
}

/// One increment per truth step: `ΔY_i = h^{mode_i}(t_i, x_i)Δt + σ_B ΔB_i`
/// with `ΔB_i ~ N(0, Δt·I_p)` drawn from the given stream.
pub fn generate_measurements(
    system: &HybridSystem,
    truth: &[HybridState],
    rng: &mut ChaCha8Rng,
) -> MeasurementPath {
    generate_with(system, truth, Some(rng))
}

/// Noise-free variant: `ΔY_i = h(t_i, x_i)Δt` exactly.
pub fn generate_measurements_noiseless(
    system: &HybridSystem,
    truth: &[HybridState],
) -> MeasurementPath {
    generate_with(system, truth, None)
}

fn generate_with(
    system: &HybridSystem,
    truth: &[HybridState],
    mut rng: Option<&mut ChaCha8Rng>,
) -> MeasurementPath {
    let p = system.obs_dim();
    let sigma_b: Vec<f64> =
        (0..system.n_modes()).map(|m| system.obs_noise_sigma(ModeId(m))).collect();
    if truth.len() < 2 {
        return MeasurementPath {
            times: truth.iter().map(|s| s.t).collect(),
            increments: Vec::new(),
            sigma_b,
            mode_labels: Vec::new(),
            obs_dim: p,
        };
    }
    let mut increments = Vec::with_capacity(truth.len() - 1);
    let mut labels = Vec::with_capacity(truth.len() - 1);
    for w in truth.windows(2) {
        let (s, s_next) = (&w[0], &w[1]);
        let dt = s_next.t - s.t;
        let h = system.observation(s.mode).eval(s.t, &s.x);
        let sb = system.obs_noise_sigma(s.mode);
        let noise = match rng.as_deref_mut() {
            Some(r) => {
                let sd = dt.sqrt();
                DVector::from_fn(p, |_, _| {
                    let z: f64 = r.sample(rand_distr::StandardNormal);
                    sb * sd * z
                })
            }
            None => DVector::zeros(p),
        };
        increments.push(h * dt + noise);
        labels.push(s.mode);
    }
    MeasurementPath {
        times: truth.iter().map(|s| s.t).collect(),
        increments,
        sigma_b,
        mode_labels: labels,
        obs_dim: p,
    }
}

/// Read-only cost evaluator over a window of measurement steps
/// `[start, end)` (increment indices; states live on `start..=end`).
#[derive(Debug, Clone, Copy)]
pub struct CostEvaluator<'a> {
    pub system: &'a HybridSystem,
    pub path: &'a MeasurementPath,
    pub start: usize,
    pub end: usize,
}

impl<'a> CostEvaluator<'a> {
    pub fn new(
        system: &'a HybridSystem,
        path: &'a MeasurementPath,
        start: usize,
        end: usize,
    ) -> Result<Self> {
        if end > path.n_steps() || start > end {
            return Err(Error::OutOfWindow { index: end, start, end: path.n_steps() });
        }
        Ok(Self { system, path, start, end })
    }

    pub fn n_steps(&self) -> usize {
        self.end - self.start
    }

    pub fn time(&self, i: usize) -> f64 {
        self.path.times[i]
    }

    /// Per-step measurement-fit cost `(1/σ_B²)(½‖h(t_i,x)‖²Δt − h(t_i,x)·ΔY_i)`.
    pub fn step_cost(&self, i: usize, x: &DVector<f64>, mode: ModeId) -> Result<f64> {
        self.check_index(i)?;
        let h = self.system.observation(mode).eval(self.path.times[i], x);
        let dt = self.path.dt(i);
        let s2 = self.path.sigma_b[mode.0].powi(2);
        Ok((0.5 * h.norm_squared() * dt - h.dot(&self.path.increments[i])) / s2)
    }

    /// Cost plus gradient and Gauss–Newton Hessian in `x`, for the solver's
    /// quadratic expansion. Exact for affine observation maps.
    pub fn step_cost_expansion(
        &self,
        i: usize,
        x: &DVector<f64>,
        mode: ModeId,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check_index(i)?;
        let t = self.path.times[i];
        let obs = self.system.observation(mode);
        let h = obs.eval(t, x);
        let hx = obs.jacobian(t, x);
        let dt = self.path.dt(i);
        let s2 = self.path.sigma_b[mode.0].powi(2);
        let dy = &self.path.increments[i];
        let cost = (0.5 * h.norm_squared() * dt - h.dot(dy)) / s2;
        let grad = (hx.transpose() * (h * dt - dy)) / s2;
        let hess = (hx.transpose() * &hx) * (dt / s2);
        Ok((cost, grad, hess))
    }

    /// Path cost over the window:
    /// `S_u = Σ_i (1/2ε)‖u_i‖²Δt + (1/√ε) u_i·ΔW_i + step_cost(i)`,
    /// concatenated across whatever mode sequence the trajectory visited.
    /// `states` must carry one more entry than `controls`/`noises`/`modes`.
    pub fn accumulate_su(
        &self,
        states: &[DVector<f64>],
        modes: &[ModeId],
        controls: &[DVector<f64>],
        noises: &[DVector<f64>],
    ) -> Result<f64> {
        Ok(self.su_terms(states, modes, controls, noises)?.iter().sum())
    }

    /// The per-step terms of `S_u`, in window order. Summing a prefix gives
    /// the partial path cost used for the next-window prior weight.
    pub fn su_terms(
        &self,
        states: &[DVector<f64>],
        modes: &[ModeId],
        controls: &[DVector<f64>],
        noises: &[DVector<f64>],
    ) -> Result<Vec<f64>> {
        let n = self.n_steps();
        if states.len() != n + 1 || modes.len() != n || controls.len() != n || noises.len() != n {
            return Err(Error::Shape {
                what: format!(
                    "S_u needs {} states and {} controls/noises/modes, got {}/{}/{}/{}",
                    n + 1,
                    n,
                    states.len(),
                    controls.len(),
                    noises.len(),
                    modes.len()
                ),
            });
        }
        let eps = self.system.noise_scale;
        let mut terms = Vec::with_capacity(n);
        for k in 0..n {
            let i = self.start + k;
            let dt = self.path.dt(i);
            let u = &controls[k];
            let term = 0.5 / eps * u.norm_squared() * dt
                + u.dot(&noises[k]) / eps.sqrt()
                + self.step_cost(i, &states[k], modes[k])?;
            terms.push(term);
        }
        Ok(terms)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.start || i >= self.end {
            return Err(Error::OutOfWindow { index: i, start: self.start, end: self.end });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendDirection {
    /// Continue the pre-transition mode's segment past its end, under that
    /// mode's deterministic drift (no reset applied).
    Forward,
    /// Integrate the post-transition mode's drift in reverse time from its
    /// first state, covering steps before the transition.
    Backward,
}

/// Continuation of a reference trajectory in `target_mode` so cost and
/// feedback terms always compare same-mode states. Returns `n_steps + 1`
/// states on the grid, boundary first for `Forward` and boundary last for
/// `Backward` (states ordered by increasing time). A reference entirely in
/// `target_mode` is returned untouched.
pub fn extend_reference(
    system: &HybridSystem,
    times: &[f64],
    ref_states: &[DVector<f64>],
    ref_modes: &[ModeId],
    target_mode: ModeId,
    direction: ExtendDirection,
    n_steps: usize,
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    if ref_states.is_empty() || ref_states.len() != ref_modes.len() || times.len() != ref_states.len()
    {
        return Err(Error::Shape { what: "reference arrays must be non-empty and aligned".into() });
    }
    if ref_modes.iter().all(|&m| m == target_mode) {
        return Ok(ref_states.to_vec());
    }
    let dynamics = system.mode(target_mode);
    let zero_u = DVector::zeros(dynamics.noise_dim);
    match direction {
        ExtendDirection::Forward => {
            let idx = ref_modes
                .iter()
                .rposition(|&m| m == target_mode)
                .ok_or(Error::ModeMismatch { target: target_mode })?;
            let mut out = Vec::with_capacity(n_steps + 1);
            let mut x = ref_states[idx].clone();
            let mut t = times[idx];
            out.push(x.clone());
            for _ in 0..n_steps {
                x = &x + dynamics.drift(t, &x, &zero_u) * dt;
                t += dt;
                out.push(x.clone());
            }
            Ok(out)
        }
        ExtendDirection::Backward => {
            let idx = ref_modes
                .iter()
                .position(|&m| m == target_mode)
                .ok_or(Error::ModeMismatch { target: target_mode })?;
            let mut rev = Vec::with_capacity(n_steps + 1);
            let mut x = ref_states[idx].clone();
            let mut t = times[idx];
            rev.push(x.clone());
            for _ in 0..n_steps {
                x = &x - dynamics.drift(t, &x, &zero_u) * dt;
                t -= dt;
                rev.push(x.clone());
            }
            rev.reverse();
            Ok(rev)
        }
    }
}
