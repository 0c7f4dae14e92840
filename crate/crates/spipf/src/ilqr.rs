//! Sliding-window salted iLQR.
//!
//! Solves the stochastic control problem dual to windowed smoothing: per-step
//! cost `(1/2ε)‖u‖²Δt + step_cost(i)` with the measurement-fit cost of
//! [`crate::cost`], deterministic forward rollouts through guards and resets,
//! and a Riccati backward pass that propagates value derivatives through
//! nominal transitions with the saltation matrix (`V_x⁻ = Ξᵀ V_x⁺`,
//! `V_xx⁻ = Ξᵀ V_xx⁺ Ξ`). Nominal transition times are re-detected on every
//! forward pass. Regularization is Levenberg-style on `V_xx` with a
//! ×10 / ÷3 schedule; the line search accepts only strict cost decreases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::cost::CostEvaluator;
use crate::error::{Error, Result};
use crate::hybrid::{HybridState, HybridSystem, ModeId, TransitionEvent};
use crate::systems::sample_wiener;

#[derive(Debug, Clone)]
pub struct IlqrSettings {
    pub max_iters: usize,
    /// Relative cost-decrease threshold for convergence.
    pub cost_tol: f64,
    pub reg_init: f64,
    pub reg_max: f64,
    pub line_search_alphas: Vec<f64>,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        // geometric 1.0 -> 1e-3
        let alphas = (0..7).map(|i| 10f64.powf(-0.5 * i as f64)).collect();
        Self { max_iters: 30, cost_tol: 1e-6, reg_init: 1e-6, reg_max: 1e6, line_search_alphas: alphas }
    }
}

/// Time-indexed feedforward/feedback gains with the nominal they were
/// linearized around. `k_fb[i]` has the control/state dimensions of the
/// nominal's mode at step `i`.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub times: Vec<f64>,
    pub k_ff: Vec<DVector<f64>>,
    pub k_fb: Vec<DMatrix<f64>>,
    pub ref_states: Vec<DVector<f64>>,
    pub ref_modes: Vec<ModeId>,
    pub ref_aux: Vec<Vec<f64>>,
    /// Nominal transition events by window-local step index.
    pub transitions: Vec<(usize, TransitionEvent)>,
    /// Global measurement index of the window start.
    pub start_index: usize,
    /// Nominal rollout cost of this schedule.
    pub cost: f64,
    /// Value gradient at the window start (diagnostic; matches the adjoint of
    /// the rollout cost at convergence).
    pub v_x0: DVector<f64>,
}

impl GainSchedule {
    pub fn n_steps(&self) -> usize {
        self.k_ff.len()
    }
}

/// Deterministic rollout of one trajectory over a window.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<DVector<f64>>,
    pub modes: Vec<ModeId>,
    pub aux: Vec<Vec<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub noises: Vec<DVector<f64>>,
    pub events: Vec<(usize, TransitionEvent)>,
}

impl Rollout {
    pub fn last_state(&self) -> HybridState {
        HybridState {
            mode: *self.modes.last().unwrap(),
            x: self.states.last().unwrap().clone(),
            t: 0.0,
            aux: self.aux.last().unwrap().clone(),
        }
    }
}

/// Deterministic cost of a rollout under the window objective (no noise
/// coupling term: `S_u` with the recorded controls and zero increments).
pub fn rollout_cost(eval: &CostEvaluator, rollout: &Rollout) -> Result<f64> {
    let zeros: Vec<DVector<f64>> =
        rollout.controls.iter().map(|u| DVector::zeros(u.len())).collect();
    eval.accumulate_su(&rollout.states, &rollout.modes[..rollout.modes.len() - 1], &rollout.controls, &zeros)
}

/// Per-mode reference tracks over a window, extending the nominal into modes
/// it occupies only part of the time. For each mode present in the nominal,
/// missing steps are filled from the nearest native state by Euler
/// continuation of that mode's drift (forward past a segment end, reverse
/// before a segment start), mirroring [`crate::cost::extend_reference`].
/// Gains are borrowed from the nearest step whose nominal mode matches.
pub struct ResolvedReference {
    tracks: Vec<Option<ModeTrack>>,
}

struct ModeTrack {
    states: Vec<DVector<f64>>,
    /// For each step, the nearest gain index whose nominal mode matches;
    /// `None` when the mode never starts a step in the window.
    gain_idx: Vec<Option<usize>>,
}

impl ResolvedReference {
    pub fn new(system: &HybridSystem, gains: &GainSchedule) -> Self {
        let n = gains.n_steps();
        let mut tracks = Vec::with_capacity(system.n_modes());
        for m in 0..system.n_modes() {
            let mode = ModeId(m);
            let native: Vec<bool> = gains.ref_modes.iter().map(|&r| r == mode).collect();
            if !native.iter().any(|&b| b) {
                tracks.push(None);
                continue;
            }
            let dynamics = system.mode(mode);
            let zero_u = DVector::zeros(dynamics.noise_dim);
            // forward Euler chains from each native run
            let mut fwd: Vec<Option<(usize, DVector<f64>)>> = vec![None; n + 1];
            for k in 0..=n {
                if native[k] {
                    fwd[k] = Some((0, gains.ref_states[k].clone()));
                } else if k > 0 {
                    if let Some((d, x)) = &fwd[k - 1] {
                        let dt = gains.times[k] - gains.times[k - 1];
                        let x_next = x + dynamics.drift(gains.times[k - 1], x, &zero_u) * dt;
                        fwd[k] = Some((d + 1, x_next));
                    }
                }
            }
            // reverse Euler chains toward earlier steps
            let mut bwd: Vec<Option<(usize, DVector<f64>)>> = vec![None; n + 1];
            for k in (0..=n).rev() {
                if native[k] {
                    bwd[k] = Some((0, gains.ref_states[k].clone()));
                } else if k < n {
                    if let Some((d, x)) = &bwd[k + 1] {
                        let dt = gains.times[k + 1] - gains.times[k];
                        let x_prev = x - dynamics.drift(gains.times[k + 1], x, &zero_u) * dt;
                        bwd[k] = Some((d + 1, x_prev));
                    }
                }
            }
            let states: Vec<DVector<f64>> = (0..=n)
                .map(|k| match (&fwd[k], &bwd[k]) {
                    (Some((df, xf)), Some((db, xb))) => {
                        if df <= db {
                            xf.clone()
                        } else {
                            xb.clone()
                        }
                    }
                    (Some((_, xf)), None) => xf.clone(),
                    (None, Some((_, xb))) => xb.clone(),
                    (None, None) => unreachable!("mode has a native state"),
                })
                .collect();

            let native_steps: Vec<usize> = (0..n).filter(|&k| native[k]).collect();
            let gain_idx: Vec<Option<usize>> = (0..n)
                .map(|k| {
                    native_steps
                        .iter()
                        .copied()
                        .min_by_key(|&s| (s.abs_diff(k), s))
                })
                .collect();
            tracks.push(Some(ModeTrack { states, gain_idx }));
        }
        Self { tracks }
    }

    fn track(&self, mode: ModeId) -> Option<&ModeTrack> {
        self.tracks[mode.0].as_ref()
    }
}

/// Closed-loop rollout `u_i = k_ff + K_fb (x_i − ref_i)` where `ref_i` is the
/// nominal state resolved into the trajectory's current mode (extended or, if
/// the nominal never visits that mode, mapped through the reset); noise comes
/// from the supplied stream (`None` disables it). Gains are taken from the
/// nearest step whose nominal mode matches the current one; if no such step
/// exists the control is zero for that step.
pub fn rollout_controlled<R: Rng>(
    system: &HybridSystem,
    gains: &GainSchedule,
    x0: &HybridState,
    rng: Option<&mut R>,
) -> Result<Rollout> {
    let resolved = ResolvedReference::new(system, gains);
    rollout_controlled_with(system, gains, &resolved, x0, rng)
}

pub fn rollout_controlled_with<R: Rng>(
    system: &HybridSystem,
    gains: &GainSchedule,
    resolved: &ResolvedReference,
    x0: &HybridState,
    mut rng: Option<&mut R>,
) -> Result<Rollout> {
    let n = gains.n_steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut modes = Vec::with_capacity(n + 1);
    let mut aux = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut events = Vec::new();

    let mut s = HybridState { mode: x0.mode, x: x0.x.clone(), t: gains.times[0], aux: x0.aux.clone() };
    states.push(s.x.clone());
    modes.push(s.mode);
    aux.push(s.aux.clone());

    for k in 0..n {
        let dt = gains.times[k + 1] - gains.times[k];
        let u = control_at(system, gains, resolved, k, &s)?;
        let nd = system.mode(s.mode).noise_dim;
        let dw = match rng.as_deref_mut() {
            Some(r) => sample_wiener(r, nd, dt),
            None => DVector::zeros(nd),
        };
        let (next, ev) = system.step(&s, &u, dt, &dw)?;
        if let Some(ev) = ev {
            events.push((k, ev));
        }
        controls.push(u);
        noises.push(dw);
        states.push(next.x.clone());
        modes.push(next.mode);
        aux.push(next.aux.clone());
        s = next;
    }
    Ok(Rollout { states, modes, aux, controls, noises, events })
}

fn control_at(
    system: &HybridSystem,
    gains: &GainSchedule,
    resolved: &ResolvedReference,
    k: usize,
    s: &HybridState,
) -> Result<DVector<f64>> {
    if s.mode == gains.ref_modes[k] {
        return Ok(&gains.k_ff[k] + &gains.k_fb[k] * (&s.x - &gains.ref_states[k]));
    }
    match resolved.track(s.mode) {
        Some(track) => match track.gain_idx[k] {
            Some(gi) => Ok(&gains.k_ff[gi] + &gains.k_fb[gi] * (&s.x - &track.states[k])),
            None => Ok(DVector::zeros(system.mode(s.mode).noise_dim)),
        },
        None => {
            // nominal never visits this mode: require it one reset away so the
            // mismatch is at least well-posed, then fall back to zero control
            system
                .transition_between(gains.ref_modes[k], s.mode)
                .ok_or(Error::ModeMismatch { target: s.mode })?;
            Ok(DVector::zeros(system.mode(s.mode).noise_dim))
        }
    }
}

/// Uncontrolled deterministic rollout used as the initial nominal.
fn uncontrolled_nominal(
    system: &HybridSystem,
    times: &[f64],
    x0: &HybridState,
) -> Result<Rollout> {
    let n = times.len() - 1;
    let mut states = vec![x0.x.clone()];
    let mut modes = vec![x0.mode];
    let mut aux = vec![x0.aux.clone()];
    let mut controls = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut events = Vec::new();
    let mut s = HybridState { mode: x0.mode, x: x0.x.clone(), t: times[0], aux: x0.aux.clone() };
    for k in 0..n {
        let dt = times[k + 1] - times[k];
        let nd = system.mode(s.mode).noise_dim;
        let u = DVector::zeros(nd);
        let dw = DVector::zeros(nd);
        let (next, ev) = system.step(&s, &u, dt, &dw)?;
        if let Some(ev) = ev {
            events.push((k, ev));
        }
        controls.push(u);
        noises.push(dw);
        states.push(next.x.clone());
        modes.push(next.mode);
        aux.push(next.aux.clone());
        s = next;
    }
    Ok(Rollout { states, modes, aux, controls, noises, events })
}

fn schedule_from_rollout(
    eval: &CostEvaluator,
    rollout: &Rollout,
    k_ff: Vec<DVector<f64>>,
    k_fb: Vec<DMatrix<f64>>,
    cost: f64,
    v_x0: DVector<f64>,
) -> GainSchedule {
    GainSchedule {
        times: eval.path.times[eval.start..=eval.end].to_vec(),
        k_ff,
        k_fb,
        ref_states: rollout.states.clone(),
        ref_modes: rollout.modes.clone(),
        ref_aux: rollout.aux.clone(),
        transitions: rollout.events.clone(),
        start_index: eval.start,
        cost,
        v_x0,
    }
}

/// All-zero gains around the uncontrolled nominal (the SPIPF-0 ablation and
/// the solver's starting point).
pub fn zero_gain_schedule(
    system: &HybridSystem,
    eval: &CostEvaluator,
    x0: &HybridState,
) -> Result<GainSchedule> {
    let times = &eval.path.times[eval.start..=eval.end];
    let nominal = uncontrolled_nominal(system, times, x0)?;
    let cost = rollout_cost(eval, &nominal)?;
    let (k_ff, k_fb) = zero_gains(system, &nominal);
    let v_dim = system.mode(x0.mode).state_dim;
    Ok(schedule_from_rollout(eval, &nominal, k_ff, k_fb, cost, DVector::zeros(v_dim)))
}

fn zero_gains(system: &HybridSystem, nominal: &Rollout) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n = nominal.controls.len();
    let mut k_ff = Vec::with_capacity(n);
    let mut k_fb = Vec::with_capacity(n);
    for k in 0..n {
        let mode = system.mode(nominal.modes[k]);
        k_ff.push(DVector::zeros(mode.noise_dim));
        k_fb.push(DMatrix::zeros(mode.noise_dim, mode.state_dim));
    }
    (k_ff, k_fb)
}

struct BackwardOut {
    k: Vec<DVector<f64>>,
    kk: Vec<DMatrix<f64>>,
    v_x0: DVector<f64>,
}

/// Riccati backward pass over a nominal rollout. Returns `None` when a `Q_uu`
/// block loses positive definiteness at the current regularization.
fn backward_pass(
    system: &HybridSystem,
    eval: &CostEvaluator,
    nominal: &Rollout,
    reg: f64,
) -> Result<Option<BackwardOut>> {
    let n = nominal.controls.len();
    let eps = system.noise_scale;
    let mut event_at: Vec<Option<&TransitionEvent>> = vec![None; n];
    for (k, ev) in &nominal.events {
        event_at[*k] = Some(ev);
    }

    let terminal_dim = nominal.states[n].len();
    let mut v_x = DVector::zeros(terminal_dim);
    let mut v_xx = DMatrix::zeros(terminal_dim, terminal_dim);
    let mut ks = vec![DVector::zeros(0); n];
    let mut kks = vec![DMatrix::zeros(0, 0); n];

    for i in (0..n).rev() {
        let t = eval.path.times[eval.start + i];
        let dt = eval.path.dt(eval.start + i);
        let mode_id = nominal.modes[i];
        let x = &nominal.states[i];
        let u = &nominal.controls[i];

        if let Some(ev) = event_at[i] {
            // pull value derivatives through the transition at the step end
            let xi = system.saltation_matrix(
                ev.transition_index,
                ev.t,
                &ev.x_pre,
                &nominal.aux[i],
                u,
            )?;
            v_x = xi.transpose() * v_x;
            v_xx = xi.transpose() * v_xx * &xi;
            symmetrize(&mut v_xx);
        }

        let (a, b) = system.mode(mode_id).flow_jacobians(t, x, u)?;
        let nx = x.len();
        let f_x = DMatrix::identity(nx, nx) + a * dt;
        let f_u = b * dt;

        let (_, l_x, l_xx) = eval.step_cost_expansion(eval.start + i, x, mode_id)?;
        let l_u = u * (dt / eps);
        let l_uu = DMatrix::identity(u.len(), u.len()) * (dt / eps);

        let v_xx_reg = &v_xx + DMatrix::identity(nx, nx) * reg;
        let q_x = l_x + f_x.transpose() * &v_x;
        let q_u = l_u + f_u.transpose() * &v_x;
        let q_xx = l_xx + f_x.transpose() * &v_xx * &f_x;
        let q_uu = l_uu + f_u.transpose() * &v_xx_reg * &f_u;
        let q_ux = f_u.transpose() * &v_xx_reg * &f_x;

        let chol = match nalgebra::Cholesky::new(q_uu.clone()) {
            Some(c) => c,
            None => return Ok(None),
        };
        let k_i = -chol.solve(&q_u);
        let kk_i = -chol.solve(&q_ux);

        v_x = &q_x
            + kk_i.transpose() * &q_uu * &k_i
            + kk_i.transpose() * &q_u
            + q_ux.transpose() * &k_i;
        v_xx = &q_xx
            + kk_i.transpose() * &q_uu * &kk_i
            + kk_i.transpose() * &q_ux
            + q_ux.transpose() * &kk_i;
        symmetrize(&mut v_xx);

        ks[i] = k_i;
        kks[i] = kk_i;
    }
    Ok(Some(BackwardOut { k: ks, kk: kks, v_x0: v_x }))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let sym = (m.clone() + m.transpose()) * 0.5;
    *m = sym;
}

/// Solve the window's control problem from `init_state`, iterating forward
/// rollouts and salted backward passes until the relative cost decrease drops
/// below `cost_tol`, `max_iters` is reached, or regularization exhausts.
/// Returns the best-cost schedule found; exhausting regularization before any
/// accepted iterate is a [`Error::SolverStalled`] carrying the initial
/// schedule.
pub fn solve_window(
    system: &HybridSystem,
    eval: &CostEvaluator,
    init_state: &HybridState,
    settings: &IlqrSettings,
) -> Result<GainSchedule> {
    if eval.n_steps() == 0 {
        return Err(Error::Precondition { what: "window must cover at least one step".into() });
    }
    let times = &eval.path.times[eval.start..=eval.end];
    let mut nominal = uncontrolled_nominal(system, times, init_state)?;
    let mut cost = rollout_cost(eval, &nominal)?;
    if !cost.is_finite() {
        return Err(Error::NumericalDivergence { context: "initial nominal cost".into() });
    }

    let mut reg = settings.reg_init;
    let mut accepted_any = false;
    let bump = |r: f64| if r == 0.0 { 1e-8 } else { r * 10.0 };

    for iter in 0..settings.max_iters {
        // backward pass, escalating regularization until Q_uu is PD
        let bw = loop {
            match backward_pass(system, eval, &nominal, reg)? {
                Some(bw) => break bw,
                None => {
                    reg = bump(reg);
                    if reg > settings.reg_max {
                        return stalled_or_best(
                            system, eval, &nominal, cost, reg, accepted_any, settings,
                        );
                    }
                }
            }
        };

        // line search over blended feedforward steps
        let base = schedule_from_rollout(
            eval,
            &nominal,
            nominal.controls.clone(),
            bw.kk.clone(),
            cost,
            bw.v_x0.clone(),
        );
        let resolved = ResolvedReference::new(system, &base);
        let mut improved = false;
        let mut best_trial = f64::INFINITY;
        for &alpha in &settings.line_search_alphas {
            let mut trial_gains = base.clone();
            for (i, kf) in trial_gains.k_ff.iter_mut().enumerate() {
                *kf += alpha * &bw.k[i];
            }
            let trial = match rollout_controlled_with(
                system,
                &trial_gains,
                &resolved,
                init_state,
                None::<&mut rand_chacha::ChaCha8Rng>,
            ) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let trial_cost = match rollout_cost(eval, &trial) {
                Ok(c) if c.is_finite() => c,
                _ => continue,
            };
            if trial_cost < best_trial {
                best_trial = trial_cost;
            }
            if trial_cost < cost {
                log::debug!(
                    "ilqr iter={iter} alpha={alpha:.3} cost={trial_cost:.6e} reg={reg:.1e} transitions={:?}",
                    trial.events.iter().map(|(k, _)| *k).collect::<Vec<_>>()
                );
                let prev_cost = cost;
                nominal = trial;
                cost = trial_cost;
                reg = (reg / 3.0).max(settings.reg_init);
                accepted_any = true;
                improved = true;
                if prev_cost - cost <= settings.cost_tol * (1.0 + prev_cost.abs()) {
                    return finalize(system, eval, nominal, cost, settings);
                }
                break;
            }
        }
        if !improved {
            // no step moves the cost beyond tolerance: converged
            if best_trial - cost <= settings.cost_tol * (1.0 + cost.abs()) {
                return finalize(system, eval, nominal, cost, settings);
            }
            reg = bump(reg);
            if reg > settings.reg_max {
                return stalled_or_best(system, eval, &nominal, cost, reg, accepted_any, settings);
            }
        }
    }
    finalize(system, eval, nominal, cost, settings)
}

/// Final backward pass so the returned gains are linearized around the final
/// nominal; feedforward becomes `ū + k`. The exported gains are always
/// computed at the smallest positive-definite-feasible regularization, never
/// at whatever level the line search escalated to internally (large
/// regularization distorts `Q_ux` into reference-tracking gains of magnitude
/// `‖f_x‖/‖f_u‖`, which are poison for the particle rollouts downstream).
fn finalize(
    system: &HybridSystem,
    eval: &CostEvaluator,
    nominal: Rollout,
    cost: f64,
    settings: &IlqrSettings,
) -> Result<GainSchedule> {
    let mut reg = settings.reg_init;
    loop {
        match backward_pass(system, eval, &nominal, reg)? {
            Some(bw) => {
                let k_ff: Vec<DVector<f64>> = nominal
                    .controls
                    .iter()
                    .zip(&bw.k)
                    .map(|(u, k)| u + k)
                    .collect();
                return Ok(schedule_from_rollout(eval, &nominal, k_ff, bw.kk, cost, bw.v_x0));
            }
            None => {
                reg = if reg == 0.0 { 1e-8 } else { reg * 10.0 };
                if reg > settings.reg_max {
                    // fall back to open-loop gains around the nominal
                    let (_, k_fb) = zero_gains(system, &nominal);
                    let v_dim = nominal.states[0].len();
                    return Ok(schedule_from_rollout(
                        eval,
                        &nominal,
                        nominal.controls.clone(),
                        k_fb,
                        cost,
                        DVector::zeros(v_dim),
                    ));
                }
            }
        }
    }
}

fn stalled_or_best(
    system: &HybridSystem,
    eval: &CostEvaluator,
    nominal: &Rollout,
    cost: f64,
    reg: f64,
    accepted_any: bool,
    settings: &IlqrSettings,
) -> Result<GainSchedule> {
    let schedule = finalize(system, eval, nominal.clone(), cost, settings)?;
    if accepted_any {
        Ok(schedule)
    } else {
        Err(Error::SolverStalled { reg, schedule: Box::new(schedule) })
    }
}
