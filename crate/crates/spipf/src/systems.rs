//! Benchmark hybrid systems and ground-truth simulation.
//!
//! Two systems are provided: a 1-D bouncing ball with elastic impact (two
//! modes, shared linear flow, velocity flip at ground contact) and a planar
//! spring-loaded inverted pendulum (flight/stance with different state
//! dimensions, so transitions exercise non-square saltation matrices).

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;


use crate::cost::{generate_measurements, generate_measurements_noiseless, MeasurementPath};
use crate::error::{Error, Result};
use crate::hybrid::{
    HybridState, HybridSystem, ModeDynamics, ModeId, ObservationModel, Transition, TransitionEvent,
};
use crate::rng::{self, tags};

pub const DEFAULT_SIGMA_B: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct BouncingBallParams {
    pub m: f64,
    pub g: f64,
    /// Coefficient of restitution in (0, 1].
    pub e: f64,
}

impl Default for BouncingBallParams {
    fn default() -> Self {
        Self { m: 1.0, g: 9.81, e: 0.8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SlipParams {
    pub m: f64,
    pub k: f64,
    /// Rest leg length.
    pub r0: f64,
    pub g: f64,
    /// Use the classical `-2 θ̇ ṙ` Coriolis numerator instead of the `-3 θ̇ ṙ`
    /// form the stance flow is written with here.
    pub classical_coriolis: bool,
}

impl Default for SlipParams {
    fn default() -> Self {
        Self { m: 1.0, k: 64.0, r0: 1.0, g: 9.81, classical_coriolis: false }
    }
}

/// Which state components the measurement process reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Observation {
    /// Full-state observation, identity per mode (zero-padded across modes
    /// of different dimension).
    #[default]
    FullState,
    /// Position-only observation (first state component). Bouncing ball only.
    PositionOnly,
}

/// Bouncing ball with default noise scales (ε = 0.1, σ_B = 0.1).
pub fn bouncing_ball(params: &BouncingBallParams) -> HybridSystem {
    bouncing_ball_with(params, 0.1, DEFAULT_SIGMA_B)
}

/// Two modes with identical flow `[ẋ, (u − m g)/m]` and channel `[0, 1/m]`.
/// Mode 0 (falling) resets `(x, ẋ) → (x, −e ẋ)` at ground contact `x ≤ 0`;
/// mode 1 (rising) returns to mode 0 at the apex `ẋ ≤ 0` with identity reset.
pub fn bouncing_ball_with(
    params: &BouncingBallParams,
    noise_scale: f64,
    sigma_b: f64,
) -> HybridSystem {
    bouncing_ball_observed(params, noise_scale, sigma_b, Observation::FullState)
}

pub fn bouncing_ball_observed(
    params: &BouncingBallParams,
    noise_scale: f64,
    sigma_b: f64,
    observation: Observation,
) -> HybridSystem {
    assert!(params.m > 0.0 && params.e > 0.0 && params.e <= 1.0);
    let &BouncingBallParams { m, g, e } = params;

    let mode = || {
        ModeDynamics::new(
            2,
            1,
            Box::new(move |_t, x: &DVector<f64>, u: &DVector<f64>| {
                DVector::from_vec(vec![x[1], (u[0] - m * g) / m])
            }),
            Box::new(move |_t, _x| DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / m])),
        )
        .with_jacobians(Box::new(move |_t, _x, _u| {
            (
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / m]),
            )
        }))
    };

    let impact = Transition::new(
        ModeId(0),
        ModeId(1),
        Box::new(|_t, x: &DVector<f64>| x[0]),
        Box::new(|_t, _x| (0.0, RowDVector::from_vec(vec![1.0, 0.0]))),
        Box::new(move |_t, x: &DVector<f64>, _aux: &[f64]| {
            (DVector::from_vec(vec![x[0], -e * x[1]]), Vec::new())
        }),
        Box::new(move |_t, _x, _aux| {
            (DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -e]))
        }),
    );
    let apex = Transition::new(
        ModeId(1),
        ModeId(0),
        Box::new(|_t, x: &DVector<f64>| x[1]),
        Box::new(|_t, _x| (0.0, RowDVector::from_vec(vec![0.0, 1.0]))),
        Box::new(|_t, x: &DVector<f64>, _aux: &[f64]| (x.clone(), Vec::new())),
        Box::new(|_t, _x, _aux| (DVector::zeros(2), DMatrix::identity(2, 2))),
    );

    let obs = || match observation {
        Observation::FullState => ObservationModel::identity_padded(2, 2),
        Observation::PositionOnly => ObservationModel::new(
            1,
            Box::new(|_t, x: &DVector<f64>| DVector::from_vec(vec![x[0]])),
            Box::new(|_t, _x: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        ),
    };

    HybridSystem::new(
        vec![mode(), mode()],
        vec![impact, apex],
        vec![obs(), obs()],
        vec![sigma_b, sigma_b],
        noise_scale,
    )
    .expect("bouncing ball construction is static")
}

/// SLIP with default noise scales (ε = 0.01, σ_B = 0.1).
pub fn slip(params: &SlipParams) -> HybridSystem {
    slip_with(params, 0.01, DEFAULT_SIGMA_B)
}

/// Flight mode (5-dim `[p_x, v_x, p_z, v_z, θ]`) with ballistic drift and
/// velocity/angle control channels; stance mode (4-dim `[θ, θ̇, r, ṙ]`) in
/// polar leg coordinates with `m/r²` and `k/m` channel scalings. Touchdown
/// fires at `p_z − r0 sin θ ≤ 0`, liftoff when the leg regains its rest
/// length. The toe x-position is captured into the stance aux slot at
/// touchdown and read back by the liftoff reset.
pub fn slip_with(params: &SlipParams, noise_scale: f64, sigma_b: f64) -> HybridSystem {
    assert!(params.m > 0.0 && params.k > 0.0 && params.r0 > 0.0 && params.g > 0.0);
    let &SlipParams { m, k, r0, g, classical_coriolis } = params;

    let flight = ModeDynamics::new(
        5,
        3,
        Box::new(move |_t, x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_vec(vec![x[1], u[0], x[3], -g + u[1], u[2]])
        }),
        Box::new(|_t, _x| {
            DMatrix::from_row_slice(
                5,
                3,
                &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 1.],
            )
        }),
    )
    .with_jacobians(Box::new(|_t, _x, _u| {
        let mut a = DMatrix::zeros(5, 5);
        a[(0, 1)] = 1.0;
        a[(2, 3)] = 1.0;
        let b = DMatrix::from_row_slice(
            5,
            3,
            &[0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 1.],
        );
        (a, b)
    }));

    let coriolis = if classical_coriolis { -2.0 } else { -3.0 };
    let stance = ModeDynamics::new(
        4,
        2,
        Box::new(move |_t, x: &DVector<f64>, u: &DVector<f64>| {
            let (theta, theta_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
            if r.abs() < 1e-9 {
                // singular leg configuration: surface as divergence downstream
                return DVector::from_element(4, f64::NAN);
            }
            DVector::from_vec(vec![
                theta_dot,
                (coriolis * theta_dot * r_dot - g * theta.cos()) / r,
                r_dot + (m / (r * r)) * u[0],
                k * (r0 - r) / m - g * theta.sin() + theta_dot * theta_dot * r + (k / m) * u[1],
            ])
        }),
        Box::new(move |_t, x: &DVector<f64>| {
            let r = x[2];
            let rr = if r.abs() < 1e-9 { 1e-9 } else { r * r };
            DMatrix::from_row_slice(4, 2, &[0., 0., 0., 0., m / rr, 0., 0., k / m])
        }),
    );

    let touchdown = Transition::new(
        ModeId(0),
        ModeId(1),
        Box::new(move |_t, x: &DVector<f64>| x[2] - r0 * x[4].sin()),
        Box::new(move |_t, x: &DVector<f64>| {
            (0.0, RowDVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, -r0 * x[4].cos()]))
        }),
        Box::new(move |_t, x: &DVector<f64>, _aux: &[f64]| {
            let (px, vx, pz, vz, theta) = (x[0], x[1], x[2], x[3], x[4]);
            let post = DVector::from_vec(vec![
                theta,
                (px * vz - pz * vx) / (r0 * r0),
                r0,
                -vx * theta.cos() + vz * theta.sin(),
            ]);
            // toe x-position, fixed for the whole stance phase
            (post, vec![px - r0 * theta.cos()])
        }),
        Box::new(move |_t, x: &DVector<f64>, _aux: &[f64]| {
            let (px, vx, pz, vz, theta) = (x[0], x[1], x[2], x[3], x[4]);
            let r0sq = r0 * r0;
            #[rustfmt::skip]
            let jac = DMatrix::from_row_slice(4, 5, &[
                0.0,            0.0,          0.0,        0.0,         1.0,
                vz / r0sq,      -pz / r0sq,   -vx / r0sq, px / r0sq,   0.0,
                0.0,            0.0,          0.0,        0.0,         0.0,
                0.0,            -theta.cos(), 0.0,        theta.sin(), vx * theta.sin() + vz * theta.cos(),
            ]);
            (DVector::zeros(4), jac)
        }),
    );

    let liftoff = Transition::new(
        ModeId(1),
        ModeId(0),
        Box::new(move |_t, x: &DVector<f64>| r0 - x[2]),
        Box::new(|_t, _x| (0.0, RowDVector::from_vec(vec![0.0, 0.0, -1.0, 0.0]))),
        Box::new(move |_t, x: &DVector<f64>, aux: &[f64]| {
            let (theta, theta_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
            let px_toe = aux.first().copied().unwrap_or(0.0);
            let post = DVector::from_vec(vec![
                px_toe + r0 * theta.cos(),
                r_dot * theta.cos() - r * theta_dot * theta.sin(),
                r0 * theta.sin(),
                r0 * theta_dot * theta.cos() + r_dot * theta.sin(),
                theta,
            ]);
            (post, Vec::new())
        }),
        Box::new(move |_t, x: &DVector<f64>, _aux: &[f64]| {
            let (theta, theta_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
            let (s, c) = theta.sin_cos();
            #[rustfmt::skip]
            let jac = DMatrix::from_row_slice(5, 4, &[
                -r0 * s,                      0.0,      0.0,            0.0,
                -r_dot * s - r * theta_dot * c, -r * s, -theta_dot * s, c,
                r0 * c,                       0.0,      0.0,            0.0,
                -r0 * theta_dot * s + r_dot * c, r0 * c, 0.0,           s,
                1.0,                          0.0,      0.0,            0.0,
            ]);
            (DVector::zeros(5), jac)
        }),
    );

    HybridSystem::new(
        vec![flight, stance],
        vec![touchdown, liftoff],
        vec![ObservationModel::identity_padded(5, 5), ObservationModel::identity_padded(4, 5)],
        vec![sigma_b, sigma_b],
        noise_scale,
    )
    .expect("slip construction is static")
}

/// Guardless scalar linear system `dX = a X dt + c (u dt + √ε dW)` with
/// full-state observation. Used as the closed-form oracle case.
pub fn linear_1d(a: f64, channel: f64, noise_scale: f64, sigma_b: f64) -> HybridSystem {
    let mode = ModeDynamics::new(
        1,
        1,
        Box::new(move |_t, x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_vec(vec![a * x[0] + channel * u[0]])
        }),
        Box::new(move |_t, _x| DMatrix::from_element(1, 1, channel)),
    )
    .with_jacobians(Box::new(move |_t, _x, _u| {
        (DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, channel))
    }));
    HybridSystem::new(
        vec![mode],
        vec![],
        vec![ObservationModel::identity_padded(1, 1)],
        vec![sigma_b],
        noise_scale,
    )
    .expect("linear system construction is static")
}

/// Guardless planar double integrator `[ẋ, u]` with unit channel on the
/// velocity. Handy as a linear multi-dimensional test problem.
pub fn double_integrator(noise_scale: f64, sigma_b: f64) -> HybridSystem {
    let mode = ModeDynamics::new(
        2,
        1,
        Box::new(|_t, x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[1], u[0]])),
        Box::new(|_t, _x| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
    )
    .with_jacobians(Box::new(|_t, _x, _u| {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
    }));
    HybridSystem::new(
        vec![mode],
        vec![],
        vec![ObservationModel::identity_padded(2, 2)],
        vec![sigma_b],
        noise_scale,
    )
    .expect("double integrator construction is static")
}

/// Ground-truth rollout plus its measurement path.
#[derive(Debug, Clone)]
pub struct TruthRollout {
    pub states: Vec<HybridState>,
    pub transitions: Vec<(usize, TransitionEvent)>,
    pub measurements: MeasurementPath,
}

impl TruthRollout {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn mode_at_step(&self, i: usize) -> ModeId {
        self.states[i].mode
    }

    /// Time of the first transition, if any occurred.
    pub fn first_transition_time(&self) -> Option<f64> {
        self.transitions.first().map(|(_, ev)| ev.t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TruthOptions {
    pub process_noise: bool,
    pub measurement_noise: bool,
}

impl Default for TruthOptions {
    fn default() -> Self {
        Self { process_noise: true, measurement_noise: true }
    }
}

/// Uncontrolled noisy rollout of the system from `x0` over `[x0.t, x0.t + t_final]`
/// on a uniform grid, with exact transition step indices recorded and a
/// measurement path generated alongside.
pub fn simulate_truth(
    system: &HybridSystem,
    x0: HybridState,
    t_final: f64,
    dt: f64,
    seed: u64,
) -> Result<TruthRollout> {
    simulate_truth_with(system, x0, t_final, dt, seed, TruthOptions::default())
}

pub fn simulate_truth_with(
    system: &HybridSystem,
    x0: HybridState,
    t_final: f64,
    dt: f64,
    seed: u64,
    opts: TruthOptions,
) -> Result<TruthRollout> {
    if dt <= 0.0 || t_final <= 0.0 {
        return Err(Error::Precondition { what: "simulate_truth needs dt > 0, T > 0".into() });
    }
    let n = (t_final / dt).round() as usize;
    let mut rng = rng::stream(seed, &[tags::TRUTH]);
    let mut states = Vec::with_capacity(n + 1);
    let mut transitions = Vec::new();
    let t0 = x0.t;
    states.push(x0);
    for i in 0..n {
        let s = states.last().unwrap();
        let nd = system.mode(s.mode).noise_dim;
        let dw = if opts.process_noise {
            sample_wiener(&mut rng, nd, dt)
        } else {
            DVector::zeros(nd)
        };
        let u = DVector::zeros(nd);
        let (mut next, ev) = system.step(s, &u, dt, &dw).map_err(|e| Error::FilterFailure {
            step: i,
            context: format!("truth simulation failed: {e}"),
        })?;
        next.t = t0 + (i + 1) as f64 * dt; // keep the grid exact
        if let Some(ev) = ev {
            transitions.push((i, ev));
        }
        states.push(next);
    }
    let measurements = if opts.measurement_noise {
        generate_measurements(system, &states, &mut rng::stream(seed, &[tags::MEASUREMENT]))
    } else {
        generate_measurements_noiseless(system, &states)
    };
    Ok(TruthRollout { states, transitions, measurements })
}

/// Sample a Wiener increment `N(0, dt·I)`.
pub fn sample_wiener<R: Rng>(rng: &mut R, dim: usize, dt: f64) -> DVector<f64> {
    let sd = dt.sqrt();
    DVector::from_fn(dim, |_, _| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        sd * z
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn ball_reset_jacobian_matches_printed_matrix() {
        let e = 0.8;
        let sys = bouncing_ball(&BouncingBallParams { m: 1.0, g: 9.81, e });
        let x = DVector::from_vec(vec![0.0, -3.0]);
        let (rt, rx) = sys.transition(0).reset_jacobian(0.0, &x, &[]);
        assert_relative_eq!(rx, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -e]));
        assert!(rt.amax() < 1e-15);
    }

    #[test]
    fn elastic_drop_conserves_speed_and_height() {
        let params = BouncingBallParams { m: 1.0, g: 9.81, e: 1.0 };
        let sys = bouncing_ball(&params);
        let h0 = 1.0;
        let dt = 1e-4;
        let x0 = HybridState::new(ModeId(0), DVector::from_vec(vec![h0, 0.0]), 0.0);
        let truth = simulate_truth_with(
            &sys,
            x0,
            0.95,
            dt,
            0,
            TruthOptions { process_noise: false, measurement_noise: false },
        )
        .unwrap();
        let (step, ev) = &truth.transitions[0];
        let t_impact = (*step + 1) as f64 * dt;
        assert_relative_eq!(t_impact, (2.0 * h0 / params.g).sqrt(), epsilon = 2e-3);
        let v_impact = ev.x_pre[1];
        assert_relative_eq!(v_impact.abs(), (2.0 * params.g * h0).sqrt(), epsilon = 2e-2);
        assert_relative_eq!(ev.x_post[1], -v_impact, epsilon = 1e-12);
        // apex height returns to h0 (Euler drift tolerance)
        let apex = truth.states.iter().map(|s| s.x[0]).fold(f64::MIN, f64::max);
        assert!((apex - h0).abs() < 5e-3, "apex {apex}");
    }

    #[test]
    fn ballistic_closed_form_pre_impact() {
        let sys = bouncing_ball(&BouncingBallParams::default());
        let dt = 0.01;
        let mut s = HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0);
        for i in 0..40 {
            let (next, ev) = sys.step(&s, &DVector::zeros(1), dt, &DVector::zeros(1)).unwrap();
            assert!(ev.is_none());
            let t = (i + 1) as f64 * dt;
            assert!((next.x[0] - (1.0 - 0.5 * 9.81 * t * t)).abs() < 9.81 * dt * t);
            assert_relative_eq!(next.x[1], -9.81 * t, epsilon = 1e-12);
            s = next;
        }
    }

    #[test]
    fn energy_non_increasing_across_impacts() {
        let params = BouncingBallParams { m: 1.0, g: 9.81, e: 0.7 };
        let sys = bouncing_ball(&params);
        let dt = 1e-3;
        let mut s = HybridState::new(ModeId(0), DVector::from_vec(vec![0.5, 0.0]), 0.0);
        let energy = |x: &DVector<f64>| 0.5 * x[1] * x[1] + params.g * x[0];
        let per_step_drift = 0.5 * params.g * params.g * dt * dt + 1e-12;
        for _ in 0..1500 {
            let e_prev = energy(&s.x);
            let (next, ev) = sys.step(&s, &DVector::zeros(1), dt, &DVector::zeros(1)).unwrap();
            let e_next = energy(&next.x);
            if ev.as_ref().map(|e| e.to == ModeId(1)).unwrap_or(false) {
                assert!(e_next <= e_prev + per_step_drift, "impact must not add energy");
            } else {
                assert!((e_next - e_prev).abs() <= per_step_drift * 2.0 + 1e-9);
            }
            s = next;
        }
    }

    #[test]
    fn slip_vertical_touchdown_reset() {
        let p = SlipParams::default();
        let sys = slip(&p);
        let v = 2.5;
        let x = DVector::from_vec(vec![0.0, 0.0, p.r0, -v, FRAC_PI_2]);
        let (post, aux) = sys.transition(0).reset(0.0, &x, &[]);
        assert_relative_eq!(post[0], FRAC_PI_2);
        assert_relative_eq!(post[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(post[2], p.r0);
        assert_relative_eq!(post[3], -v, epsilon = 1e-12);
        assert_relative_eq!(aux[0], -p.r0 * FRAC_PI_2.cos(), epsilon = 1e-12);
    }

    #[test]
    fn slip_vertical_liftoff_reset() {
        let p = SlipParams::default();
        let sys = slip(&p);
        let v = 1.3;
        let px_toe = 0.4;
        let x = DVector::from_vec(vec![FRAC_PI_2, 0.0, p.r0, v]);
        let (post, aux) = sys.transition(1).reset(0.0, &x, &[px_toe]);
        assert_relative_eq!(post[0], px_toe, epsilon = 1e-12); // cos(π/2)=0
        assert_relative_eq!(post[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(post[2], p.r0, epsilon = 1e-12);
        assert_relative_eq!(post[3], v, epsilon = 1e-12);
        assert_relative_eq!(post[4], FRAC_PI_2);
        assert!(aux.is_empty());
    }

    #[test]
    fn slip_touchdown_then_liftoff_recovers_velocities() {
        // at p_x = 0 and θ = π/2 the composition is exactly invertible
        let p = SlipParams::default();
        let sys = slip(&p);
        let (vx, vz) = (0.7, -2.0);
        let flight = DVector::from_vec(vec![0.0, vx, p.r0, vz, FRAC_PI_2]);
        let (stance, aux) = sys.transition(0).reset(0.0, &flight, &[]);
        let (back, _) = sys.transition(1).reset(0.0, &stance, &aux);
        assert_relative_eq!(back[1], vx, epsilon = 1e-12);
        assert_relative_eq!(back[3], vz, epsilon = 1e-12);
        assert_relative_eq!(back[4], FRAC_PI_2);
    }

    #[test]
    fn slip_reset_jacobians_match_finite_differences() {
        let p = SlipParams::default();
        let sys = slip(&p);
        let mut rng = crate::rng::stream(11, &[5]);
        for _ in 0..20 {
            // touchdown states near the guard with varied geometry
            let theta = FRAC_PI_2 + rng.gen_range(-0.5..0.5);
            let x = DVector::from_vec(vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-2.0..2.0),
                p.r0 * theta.sin(),
                rng.gen_range(-4.0..-0.5),
                theta,
            ]);
            let (_, jac) = sys.transition(0).reset_jacobian(0.0, &x, &[]);
            let mut fd = DMatrix::zeros(4, 5);
            for i in 0..5 {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let (rp, _) = sys.transition(0).reset(0.0, &xp, &[]);
                let (rm, _) = sys.transition(0).reset(0.0, &xm, &[]);
                fd.set_column(i, &((rp - rm) / (2.0 * h)));
            }
            let scale = jac.amax().max(1.0);
            assert!((&jac - &fd).amax() / scale < 1e-4, "touchdown jacobian FD mismatch");
        }
        // liftoff jacobian at a generic stance state
        let x = DVector::from_vec(vec![1.2, -0.8, 0.9, 1.7]);
        let aux = [0.3];
        let (_, jac) = sys.transition(1).reset_jacobian(0.0, &x, &aux);
        let mut fd = DMatrix::zeros(5, 4);
        for i in 0..4 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let (rp, _) = sys.transition(1).reset(0.0, &xp, &aux);
            let (rm, _) = sys.transition(1).reset(0.0, &xm, &aux);
            fd.set_column(i, &((rp - rm) / (2.0 * h)));
        }
        assert!((&jac - &fd).amax() < 1e-6);
    }

    #[test]
    fn stance_jacobian_richardson_self_check() {
        let p = SlipParams::default();
        let sys = slip(&p);
        let x = DVector::from_vec(vec![1.4, -1.0, 0.8, -2.0]);
        let u = DVector::from_vec(vec![0.1, -0.2]);
        let (a, _) = sys.mode(ModeId(1)).flow_jacobians(0.0, &x, &u).unwrap();
        // half-step central difference
        let mut a_half = DMatrix::zeros(4, 4);
        for i in 0..4 {
            let h = 0.5e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (sys.mode(ModeId(1)).drift(0.0, &xp, &u)
                - sys.mode(ModeId(1)).drift(0.0, &xm, &u))
                / (2.0 * h);
            a_half.set_column(i, &col);
        }
        assert!((&a - &a_half).amax() / a.amax() < 1e-4);
    }

    #[test]
    fn guard_gradients_match_finite_differences() {
        let ball = bouncing_ball(&BouncingBallParams::default());
        let slip_sys = slip(&SlipParams::default());
        let mut rng = crate::rng::stream(3, &[9]);
        for (sys, dims) in [(&ball, vec![2usize, 2]), (&slip_sys, vec![5, 4])] {
            for (ti, tr) in sys.transitions().iter().enumerate() {
                let dim = dims[tr.from.0];
                for _ in 0..100 {
                    let x = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
                    let (gt, gx) = tr.guard_gradient(0.0, &x);
                    assert_eq!(gt, 0.0, "time-invariant guards");
                    for i in 0..dim {
                        let h = 1e-5 * x[i].abs().max(1.0);
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[i] += h;
                        xm[i] -= h;
                        let fd = (tr.guard(0.0, &xp) - tr.guard(0.0, &xm)) / (2.0 * h);
                        let scale = gx[i].abs().max(1.0);
                        assert!(
                            (gx[i] - fd).abs() / scale < 1e-5,
                            "guard grad mismatch sys tr={ti} comp {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn truth_has_one_impact_near_ballistic_time() {
        let sys = bouncing_ball(&BouncingBallParams::default());
        let x0 = HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0);
        let truth = simulate_truth_with(
            &sys,
            x0,
            0.7,
            0.01,
            0,
            TruthOptions { process_noise: false, measurement_noise: false },
        )
        .unwrap();
        assert_eq!(truth.transitions.len(), 1);
        let t = truth.first_transition_time().unwrap();
        assert!((t - (2.0f64 / 9.81).sqrt()).abs() < 0.02, "impact at {t}");
    }

    #[test]
    fn zero_noise_truth_is_seed_independent() {
        let sys = bouncing_ball(&BouncingBallParams::default());
        let opts = TruthOptions { process_noise: false, measurement_noise: false };
        let x0 = || HybridState::new(ModeId(0), DVector::from_vec(vec![1.0, 0.0]), 0.0);
        let a = simulate_truth_with(&sys, x0(), 0.5, 0.01, 1, opts).unwrap();
        let b = simulate_truth_with(&sys, x0(), 0.5, 0.01, 999, opts).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa.x, sb.x);
        }
        assert_eq!(a.measurements.increments, b.measurements.increments);
    }

    #[test]
    fn slip_default_scenario_reaches_stance_once() {
        let p = SlipParams::default();
        let sys = slip(&p);
        let x0 = HybridState::new(
            ModeId(0),
            DVector::from_vec(vec![0.0, 0.5, 1.6, 0.0, FRAC_PI_2]),
            0.0,
        );
        let truth = simulate_truth_with(
            &sys,
            x0,
            0.6,
            0.001,
            0,
            TruthOptions { process_noise: false, measurement_noise: false },
        )
        .unwrap();
        assert_eq!(truth.transitions.len(), 1, "exactly one touchdown");
        let t = truth.first_transition_time().unwrap();
        assert!((t - 0.35).abs() < 0.01, "touchdown at {t}");
        // stance leg never approaches the singular configuration
        for s in &truth.states {
            if s.mode == ModeId(1) {
                assert!(s.x[2] > 0.2, "leg length {}", s.x[2]);
            }
        }
    }

    #[test]
    fn guards_negative_inside_opposite_domain() {
        let sys = bouncing_ball(&BouncingBallParams::default());
        // inside mode 1's domain (rising, above ground) the impact guard of mode 0 is positive
        let rising = DVector::from_vec(vec![0.4, 2.0]);
        assert!(sys.transition(0).guard(0.0, &rising) > 0.0);
        // below ground, the impact guard is negative
        let below = DVector::from_vec(vec![-0.1, -1.0]);
        assert!(sys.transition(0).guard(0.0, &below) < 0.0);
        let slip_sys = slip(&SlipParams::default());
        // flight state above the leg's reach: touchdown guard positive
        let high = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, FRAC_PI_2]);
        assert!(slip_sys.transition(0).guard(0.0, &high) > 0.0);
        // compressed stance leg: liftoff guard positive
        let compressed = DVector::from_vec(vec![FRAC_PI_2, 0.0, 0.8, 0.0]);
        assert!(slip_sys.transition(1).guard(0.0, &compressed) > 0.0);
    }
}
