//! Hybrid stochastic systems: per-mode flows, guards, resets, and
//! saltation-matrix linearization of transitions.
//!
//! A system is a set of modes with controlled drift `F_j(t,x) + σ_j(t,x)·u`
//! and diffusion `σ_j(t,x)·√ε`, plus transitions that fire when a scalar
//! guard becomes non-positive and map the state into the destination mode via
//! a reset. Guard crossings are detected at step boundaries and the reset is
//! applied at the step end; the event-time bisection in
//! [`HybridSystem::saltation_fd_oracle`] exists only as ground truth for the
//! closed-form saltation matrix.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// Index of a mode within its owning system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeId(pub usize);

impl std::fmt::Display for ModeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type DriftFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type DiffusionFn = Box<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type JacobianFn =
    Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync>;
pub type GuardFn = Box<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
pub type GuardGradFn = Box<dyn Fn(f64, &DVector<f64>) -> (f64, RowDVector<f64>) + Send + Sync>;
/// Reset maps `(t, x, aux)` in the source mode to `(x⁺, aux⁺)` in the target
/// mode. `aux` carries per-mode metadata outside the differentiated state
/// (e.g. a toe position captured at touchdown).
pub type ResetFn =
    Box<dyn Fn(f64, &DVector<f64>, &[f64]) -> (DVector<f64>, Vec<f64>) + Send + Sync>;
/// Returns `(∂_t R, ∂_x R)` at fixed `aux`.
pub type ResetJacFn =
    Box<dyn Fn(f64, &DVector<f64>, &[f64]) -> (DVector<f64>, DMatrix<f64>) + Send + Sync>;
pub type ObsFn = Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ObsJacFn = Box<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Smooth dynamics of one mode. The drift is the *controlled* drift
/// `F_j(t,x) + σ_j(t,x)·u`; the control dimension equals the diffusion's
/// column count, since control and noise share the channel matrix.
pub struct ModeDynamics {
    pub state_dim: usize,
    pub noise_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    jacobians: Option<JacobianFn>,
}

impl std::fmt::Debug for ModeDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModeDynamics")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("analytic_jacobians", &self.jacobians.is_some())
            .finish()
    }
}

impl ModeDynamics {
    pub fn new(state_dim: usize, noise_dim: usize, drift: DriftFn, diffusion: DiffusionFn) -> Self {
        Self { state_dim, noise_dim, drift, diffusion, jacobians: None }
    }

    /// Register analytic Jacobians `(∂ drift/∂x, ∂ drift/∂u)`.
    pub fn with_jacobians(mut self, jac: JacobianFn) -> Self {
        self.jacobians = Some(jac);
        self
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.drift)(t, x, u)
    }

    pub fn diffusion(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.diffusion)(t, x)
    }

    /// Jacobians of the controlled drift: analytic when registered, central
    /// finite differences with step `1e-6·max(1, |component|)` otherwise.
    pub fn flow_jacobians(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (a, b) = match &self.jacobians {
            Some(jac) => jac(t, x, u),
            None => {
                let n = self.state_dim;
                let m = self.noise_dim;
                let mut a = DMatrix::zeros(n, n);
                let mut b = DMatrix::zeros(n, m);
                for i in 0..n {
                    let h = 1e-6 * x[i].abs().max(1.0);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let col = ((self.drift)(t, &xp, u) - (self.drift)(t, &xm, u)) / (2.0 * h);
                    a.set_column(i, &col);
                }
                for i in 0..m {
                    let h = 1e-6 * u[i].abs().max(1.0);
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[i] += h;
                    um[i] -= h;
                    let col = ((self.drift)(t, x, &up) - (self.drift)(t, x, &um)) / (2.0 * h);
                    b.set_column(i, &col);
                }
                (a, b)
            }
        };
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence {
                context: format!("non-finite flow Jacobian at t={t}"),
            });
        }
        Ok((a, b))
    }
}

/// A guarded transition between two modes.
pub struct Transition {
    pub from: ModeId,
    pub to: ModeId,
    guard: GuardFn,
    guard_gradient: GuardGradFn,
    reset: ResetFn,
    reset_jacobian: ResetJacFn,
}

impl std::fmt::Debug for Transition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Transition({} -> {})", self.from, self.to)
    }
}

impl Transition {
    pub fn new(
        from: ModeId,
        to: ModeId,
        guard: GuardFn,
        guard_gradient: GuardGradFn,
        reset: ResetFn,
        reset_jacobian: ResetJacFn,
    ) -> Self {
        Self { from, to, guard, guard_gradient, reset, reset_jacobian }
    }

    pub fn guard(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.guard)(t, x)
    }

    pub fn guard_gradient(&self, t: f64, x: &DVector<f64>) -> (f64, RowDVector<f64>) {
        (self.guard_gradient)(t, x)
    }

    pub fn reset(&self, t: f64, x: &DVector<f64>, aux: &[f64]) -> (DVector<f64>, Vec<f64>) {
        (self.reset)(t, x, aux)
    }

    pub fn reset_jacobian(
        &self,
        t: f64,
        x: &DVector<f64>,
        aux: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        (self.reset_jacobian)(t, x, aux)
    }
}

/// Per-mode observation map `h^j(t, x)`; all modes share the dimension `p`.
pub struct ObservationModel {
    pub dim: usize,
    h: ObsFn,
    jacobian: ObsJacFn,
}

impl std::fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ObservationModel(dim={})", self.dim)
    }
}

impl ObservationModel {
    pub fn new(dim: usize, h: ObsFn, jacobian: ObsJacFn) -> Self {
        Self { dim, h, jacobian }
    }

    /// Full-state observation, zero-padded to `p` when the mode has fewer
    /// states than the observation vector.
    pub fn identity_padded(state_dim: usize, p: usize) -> Self {
        assert!(p >= state_dim, "observation dim must cover the state");
        let h = Box::new(move |_t: f64, x: &DVector<f64>| {
            let mut y = DVector::zeros(p);
            y.rows_mut(0, state_dim).copy_from(x);
            y
        });
        let jac = Box::new(move |_t: f64, _x: &DVector<f64>| {
            let mut m = DMatrix::zeros(p, state_dim);
            for i in 0..state_dim {
                m[(i, i)] = 1.0;
            }
            m
        });
        Self { dim: p, h, jacobian: jac }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(t, x)
    }

    pub fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(t, x)
    }
}

/// State of a hybrid trajectory: mode label, state vector, time, and
/// mode-specific metadata that resets may read or write.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub mode: ModeId,
    pub x: DVector<f64>,
    pub t: f64,
    pub aux: Vec<f64>,
}

impl HybridState {
    pub fn new(mode: ModeId, x: DVector<f64>, t: f64) -> Self {
        Self { mode, x, t, aux: Vec::new() }
    }
}

/// Record of one guard firing during a step.
#[derive(Debug, Clone)]
pub struct TransitionEvent {
    pub transition_index: usize,
    pub from: ModeId,
    pub to: ModeId,
    pub t: f64,
    pub x_pre: DVector<f64>,
    pub x_post: DVector<f64>,
}

/// A hybrid automaton with stochastic per-mode flows. Immutable after
/// construction; all operations are pure given their inputs, with randomness
/// supplied by the caller as sampled Wiener increments.
pub struct HybridSystem {
    modes: Vec<ModeDynamics>,
    transitions: Vec<Transition>,
    observations: Vec<ObservationModel>,
    obs_noise_sigma: Vec<f64>,
    /// Process-noise scale ε: the diffusion enters as σ_j √ε dW.
    pub noise_scale: f64,
    outgoing: Vec<Vec<usize>>,
}

impl std::fmt::Debug for HybridSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridSystem")
            .field("modes", &self.modes.len())
            .field("transitions", &self.transitions)
            .field("obs_dim", &self.obs_dim())
            .field("noise_scale", &self.noise_scale)
            .finish()
    }
}

impl HybridSystem {
    pub fn new(
        modes: Vec<ModeDynamics>,
        transitions: Vec<Transition>,
        observations: Vec<ObservationModel>,
        obs_noise_sigma: Vec<f64>,
        noise_scale: f64,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config { context: "system needs at least one mode".into() });
        }
        if observations.len() != modes.len() || obs_noise_sigma.len() != modes.len() {
            return Err(Error::Config {
                context: "observation models and noise sigmas must be given per mode".into(),
            });
        }
        let p = observations[0].dim;
        if observations.iter().any(|o| o.dim != p) {
            return Err(Error::Config {
                context: "observation dimension must be constant across modes".into(),
            });
        }
        if obs_noise_sigma.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config { context: "obs_noise_sigma must be positive".into() });
        }
        if noise_scale <= 0.0 {
            return Err(Error::Config { context: "noise_scale must be positive".into() });
        }
        let mut outgoing = vec![Vec::new(); modes.len()];
        for (i, tr) in transitions.iter().enumerate() {
            if tr.from.0 >= modes.len() || tr.to.0 >= modes.len() {
                return Err(Error::Config {
                    context: format!("transition {i} references an unknown mode"),
                });
            }
            outgoing[tr.from.0].push(i);
        }
        Ok(Self { modes, transitions, observations, obs_noise_sigma, noise_scale, outgoing })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, id: ModeId) -> &ModeDynamics {
        &self.modes[id.0]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, index: usize) -> &Transition {
        &self.transitions[index]
    }

    pub fn outgoing(&self, mode: ModeId) -> &[usize] {
        &self.outgoing[mode.0]
    }

    /// Index of the single transition from `from` to `to`, if registered.
    pub fn transition_between(&self, from: ModeId, to: ModeId) -> Option<usize> {
        self.outgoing[from.0].iter().copied().find(|&i| self.transitions[i].to == to)
    }

    pub fn observation(&self, mode: ModeId) -> &ObservationModel {
        &self.observations[mode.0]
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].dim
    }

    pub fn obs_noise_sigma(&self, mode: ModeId) -> f64 {
        self.obs_noise_sigma[mode.0]
    }

    /// One Euler–Maruyama step with boundary-time guard handling:
    /// `x' = x + (F_j + σ_j u) dt + σ_j √ε dW`, then the current mode's guards
    /// are evaluated at `(t+dt, x')`. A single active guard applies its reset
    /// at the step end (the jump time is approximated by the step boundary);
    /// several active guards are an error rather than a silent tie-break.
    ///
    /// `dw` is the sampled Wiener increment, typically `N(0, dt·I)`.
    pub fn step(
        &self,
        s: &HybridState,
        u: &DVector<f64>,
        dt: f64,
        dw: &DVector<f64>,
    ) -> Result<(HybridState, Option<TransitionEvent>)> {
        let mode = &self.modes[s.mode.0];
        if u.len() != mode.noise_dim || dw.len() != mode.noise_dim {
            return Err(Error::Shape {
                what: format!(
                    "mode {} expects control/noise dim {}, got {}/{}",
                    s.mode,
                    mode.noise_dim,
                    u.len(),
                    dw.len()
                ),
            });
        }
        let drift = mode.drift(s.t, &s.x, u);
        let sigma = mode.diffusion(s.t, &s.x);
        let x_flow = &s.x + drift * dt + sigma * (self.noise_scale.sqrt() * dw);
        let t_next = s.t + dt;
        if x_flow.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence {
                context: format!("state diverged in mode {} at t={t_next}", s.mode),
            });
        }

        let active: Vec<usize> = self.outgoing[s.mode.0]
            .iter()
            .copied()
            .filter(|&i| self.transitions[i].guard(t_next, &x_flow) <= 0.0)
            .collect();
        match active.len() {
            0 => Ok((
                HybridState { mode: s.mode, x: x_flow, t: t_next, aux: s.aux.clone() },
                None,
            )),
            1 => {
                let idx = active[0];
                let tr = &self.transitions[idx];
                let (x_post, aux_post) = tr.reset(t_next, &x_flow, &s.aux);
                if x_post.len() != self.modes[tr.to.0].state_dim {
                    return Err(Error::Shape {
                        what: format!(
                            "reset {} -> {} produced dim {}, mode expects {}",
                            tr.from,
                            tr.to,
                            x_post.len(),
                            self.modes[tr.to.0].state_dim
                        ),
                    });
                }
                if x_post.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalDivergence {
                        context: format!("reset produced non-finite state at t={t_next}"),
                    });
                }
                let event = TransitionEvent {
                    transition_index: idx,
                    from: tr.from,
                    to: tr.to,
                    t: t_next,
                    x_pre: x_flow,
                    x_post: x_post.clone(),
                };
                Ok((
                    HybridState { mode: tr.to, x: x_post, t: t_next, aux: aux_post },
                    Some(event),
                ))
            }
            n => Err(Error::MultipleGuards { t: t_next, mode: s.mode, count: n }),
        }
    }

    /// Control vector used for the destination flow of a transition: the
    /// supplied control when the channel counts agree, zero otherwise
    /// (cross-dimension transitions have no shared control signal).
    fn post_control(&self, tr: &Transition, u: &DVector<f64>) -> DVector<f64> {
        let to_dim = self.modes[tr.to.0].noise_dim;
        if u.len() == to_dim {
            u.clone()
        } else {
            DVector::zeros(to_dim)
        }
    }

    /// Saltation matrix
    /// `Ξ = ∂_x R + (F_k(x⁺) − ∂_x R·F_j(x⁻) − ∂_t R) ⊗ ∂_x g / (∂_t g + ∂_x g·F_j)`,
    /// the first-order map from pre-impact perturbations to post-impact
    /// perturbations at the nominal jump time. `x_pre` must sit at (or near)
    /// the guard; transversality is enforced through the denominator.
    pub fn saltation_matrix(
        &self,
        transition_index: usize,
        t: f64,
        x_pre: &DVector<f64>,
        aux: &[f64],
        u: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let tr = &self.transitions[transition_index];
        let f_pre = self.modes[tr.from.0].drift(t, x_pre, u);
        let (g_t, g_x) = tr.guard_gradient(t, x_pre);
        let denom = g_t + (&g_x * &f_pre)[0];
        if denom.abs() < 1e-9 {
            return Err(Error::GrazingContact { rate: denom });
        }
        let (x_post, _aux_post) = tr.reset(t, x_pre, aux);
        let u_post = self.post_control(tr, u);
        let f_post = self.modes[tr.to.0].drift(t, &x_post, &u_post);
        let (r_t, r_x) = tr.reset_jacobian(t, x_pre, aux);
        let num = f_post - &r_x * f_pre - r_t;
        Ok(r_x + num * g_x / denom)
    }

    /// Maps a pre-impact state at reference time `t_ref` through the true
    /// transition: the event time is re-detected by bisection (tolerance
    /// 1e-10 in time), the reset applied there, and the post-state flowed back
    /// to `t_ref` in the destination mode. States already past the guard are
    /// traced backwards to the crossing first. Deterministic dynamics with
    /// the supplied control.
    pub fn event_resolved_transition(
        &self,
        transition_index: usize,
        t_ref: f64,
        x: &DVector<f64>,
        aux: &[f64],
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let tr = &self.transitions[transition_index];
        let from = tr.from;
        let g0 = tr.guard(t_ref, x);

        let (tc, xc) = if g0.abs() < 1e-14 * (1.0 + x.norm()) {
            (t_ref, x.clone())
        } else {
            // Expected crossing time from the first-order guard rate.
            let f = self.modes[from.0].drift(t_ref, x, u);
            let (g_t, g_x) = tr.guard_gradient(t_ref, x);
            let rate = g_t + (&g_x * &f)[0];
            if rate.abs() < 1e-12 {
                return Err(Error::OracleInapplicable {
                    context: "guard rate vanishes at reference point".into(),
                });
            }
            let t_exp = (g0 / rate).abs();
            let forward = g0 > 0.0;
            self.find_crossing(transition_index, t_ref, x, u, forward, t_exp)?
        };

        let (x_post, _aux_post) = tr.reset(tc, &xc, aux);
        let u_post = self.post_control(tr, u);
        Ok(self.integrate_drift(tr.to, tc, &x_post, &u_post, t_ref))
    }

    /// Locates the guard crossing of the deterministic flow of `x`'s mode,
    /// searching forward in time when the guard is still positive and
    /// backward when the state is already past it.
    fn find_crossing(
        &self,
        transition_index: usize,
        t0: f64,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        forward: bool,
        t_expected: f64,
    ) -> Result<(f64, DVector<f64>)> {
        let tr = &self.transitions[transition_index];
        let mode = tr.from;
        let dir = if forward { 1.0 } else { -1.0 };
        let mut h = dir * (t_expected / 4.0).max(1e-9);
        let mut t = t0;
        let mut x = x0.clone();
        // `positive side` means g > 0: the not-yet-crossed side.
        let mut g = tr.guard(t, &x);
        let start_positive = g > 0.0;
        for _ in 0..500 {
            let t_next = t + h;
            let x_next = self.rk4_span(mode, t, &x, u, t_next);
            let g_next = tr.guard(t_next, &x_next);
            if (g_next > 0.0) != start_positive {
                // Bracketed: bisect on time, always stepping from the bracketing state.
                let (mut ta, mut xa, mut tb) = (t, x, t_next);
                while (tb - ta).abs() > 1e-10 {
                    let tm = 0.5 * (ta + tb);
                    let xm = self.rk4_span(mode, ta, &xa, u, tm);
                    if (tr.guard(tm, &xm) > 0.0) == start_positive {
                        ta = tm;
                        xa = xm;
                    } else {
                        tb = tm;
                    }
                }
                let xc = self.rk4_span(mode, ta, &xa, u, 0.5 * (ta + tb));
                return Ok((0.5 * (ta + tb), xc));
            }
            t = t_next;
            x = x_next;
            g = g_next;
            h *= 1.3;
            if (t - t0).abs() > 1.0 + 1e4 * t_expected {
                break;
            }
        }
        Err(Error::OracleInapplicable {
            context: format!(
                "no guard crossing found from t={t0} (g={g:.3e}, searched {}ward)",
                if forward { "for" } else { "back" }
            ),
        })
    }

    /// RK4 integration of a mode's deterministic controlled drift from `t0`
    /// to `t1` (either direction), with step count scaled to the span.
    pub fn integrate_drift(
        &self,
        mode: ModeId,
        t0: f64,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        t1: f64,
    ) -> DVector<f64> {
        self.rk4_span(mode, t0, x0, u, t1)
    }

    fn rk4_span(
        &self,
        mode: ModeId,
        t0: f64,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        t1: f64,
    ) -> DVector<f64> {
        let span = t1 - t0;
        if span == 0.0 {
            return x0.clone();
        }
        let n = ((span.abs() / 1e-3).ceil() as usize).clamp(4, 20_000);
        let h = span / n as f64;
        let dyn_ = &self.modes[mode.0];
        let mut t = t0;
        let mut x = x0.clone();
        for _ in 0..n {
            let k1 = dyn_.drift(t, &x, u);
            let k2 = dyn_.drift(t + 0.5 * h, &(&x + 0.5 * h * &k1), u);
            let k3 = dyn_.drift(t + 0.5 * h, &(&x + 0.5 * h * &k2), u);
            let k4 = dyn_.drift(t + h, &(&x + h * &k3), u);
            x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        x
    }

    /// Ground-truth saltation matrix by central differences: each basis
    /// perturbation `±δ·e_i` of the pre-impact state is integrated through
    /// the event-resolved transition and differenced at the nominal time.
    pub fn saltation_fd_oracle(
        &self,
        transition_index: usize,
        t: f64,
        x_pre: &DVector<f64>,
        aux: &[f64],
        u: &DVector<f64>,
        delta: f64,
    ) -> Result<DMatrix<f64>> {
        if !(1e-6..=1e-3).contains(&delta) {
            return Err(Error::Precondition {
                what: format!("oracle perturbation delta={delta} outside [1e-6, 1e-3]"),
            });
        }
        let tr = &self.transitions[transition_index];
        let f_pre = self.modes[tr.from.0].drift(t, x_pre, u);
        let (g_t, g_x) = tr.guard_gradient(t, x_pre);
        let rate = g_t + (&g_x * &f_pre)[0];
        if rate.abs() < 1e-9 {
            return Err(Error::GrazingContact { rate });
        }
        let n_from = self.modes[tr.from.0].state_dim;
        let n_to = self.modes[tr.to.0].state_dim;
        let mut xi = DMatrix::zeros(n_to, n_from);
        for i in 0..n_from {
            let mut xp = x_pre.clone();
            let mut xm = x_pre.clone();
            xp[i] += delta;
            xm[i] -= delta;
            let post_p = self.event_resolved_transition(transition_index, t, &xp, aux, u)?;
            let post_m = self.event_resolved_transition(transition_index, t, &xm, aux, u)?;
            xi.set_column(i, &((post_p - post_m) / (2.0 * delta)));
        }
        Ok(xi)
    }
}
