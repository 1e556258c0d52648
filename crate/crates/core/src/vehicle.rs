//! Unicycle kinematics with first-order actuator dynamics.
//!
//! State `z = [x, y, θ, v, ω]`, input `u = [v_cmd, ω_cmd]`. The actuator
//! channels evolve as `ξ' = ξ + dt·[u_i, ξ_i]·w_i`, which is affine in
//! `(u, ξ)` for fixed `w`.

use nalgebra::{SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type StateVec = SVector<f64, 5>;
pub type StateJacobian = SMatrix<f64, 5, 5>;
pub type ParamJacobian = SMatrix<f64, 5, 4>;
pub type InputJacobian = SMatrix<f64, 5, 2>;

pub const IX: usize = 0;
pub const IY: usize = 1;
pub const ITHETA: usize = 2;
pub const IV: usize = 3;
pub const IOMEGA: usize = 4;

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
}

impl FullState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, omega: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
            omega,
        }
    }

    pub fn to_vector(&self) -> StateVec {
        StateVec::new(self.x, self.y, self.theta, self.v, self.omega)
    }

    pub fn from_vector(z: &StateVec) -> Self {
        Self::new(z[0], z[1], z[2], z[3], z[4])
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v_cmd: f64,
    pub omega_cmd: f64,
}

impl ControlInput {
    pub fn new(v_cmd: f64, omega_cmd: f64) -> Self {
        Self { v_cmd, omega_cmd }
    }
}

/// Actuator parameters per channel: `w_v`, `w_ω` and noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorParams {
    pub w_v: [f64; 2],
    pub w_omega: [f64; 2],
    pub sigma2_v: f64,
    pub sigma2_omega: f64,
}

impl ActuatorParams {
    /// Lag model `ξ̇ = (u − ξ)/τ` on both channels.
    pub fn first_order(tau_v: f64, tau_omega: f64, sigma2_v: f64, sigma2_omega: f64) -> Self {
        Self {
            w_v: [1.0 / tau_v, -1.0 / tau_v],
            w_omega: [1.0 / tau_omega, -1.0 / tau_omega],
            sigma2_v,
            sigma2_omega,
        }
    }

    /// Input needed to hold each channel at `target` in steady state, i.e.
    /// `u = −w[1]/w[0] · ξ`. Falls back to `target` when the input gain is
    /// too small or the implied ratio is implausible.
    pub fn steady_state_input(w: [f64; 2], target: f64) -> f64 {
        if w[0].abs() < 1e-3 {
            return target;
        }
        let ratio = -w[1] / w[0];
        if (0.2..=5.0).contains(&ratio) {
            ratio * target
        } else {
            target
        }
    }
}

/// Ancillary feedback gains on speed and heading error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AncillaryGains {
    pub k_v: f64,
    pub k_theta: f64,
}

impl Default for AncillaryGains {
    fn default() -> Self {
        Self {
            k_v: -5.0,
            k_theta: -5.0,
        }
    }
}

impl AncillaryGains {
    pub const ZERO: Self = Self {
        k_v: 0.0,
        k_theta: 0.0,
    };

    /// `v_cmd + K_v e^v`, `ω_cmd + K_θ e^θ`, with errors measured from the
    /// predicted mean.
    pub fn apply(&self, u: ControlInput, actual: &FullState, predicted: &FullState) -> ControlInput {
        let e_v = actual.v - predicted.v;
        let e_theta = wrap_angle(actual.theta - predicted.theta);
        ControlInput::new(u.v_cmd + self.k_v * e_v, u.omega_cmd + self.k_theta * e_theta)
    }
}

/// Noise-free one-step prediction.
pub fn step_mean(z: &FullState, u: &ControlInput, p: &ActuatorParams, dt: f64) -> FullState {
    let (s, c) = z.theta.sin_cos();
    FullState {
        x: z.x + dt * z.v * c,
        y: z.y + dt * z.v * s,
        theta: wrap_angle(z.theta + dt * z.omega),
        v: z.v + dt * (p.w_v[0] * u.v_cmd + p.w_v[1] * z.v),
        omega: z.omega + dt * (p.w_omega[0] * u.omega_cmd + p.w_omega[1] * z.omega),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobians {
    pub a_z: StateJacobian,
    pub a_w: ParamJacobian,
}

/// Partial derivatives of [`step_mean`] with respect to the state and to the
/// stacked parameters `[w_v; w_ω]`.
///
/// With `closed_loop` the ancillary law is substituted into the actuator rows,
/// which adds `K_v w_v[0] dt` to `∂v'/∂v` and `K_θ w_ω[0] dt` to `∂ω'/∂θ`.
pub fn jacobians(
    z: &FullState,
    u: &ControlInput,
    p: &ActuatorParams,
    dt: f64,
    gains: &AncillaryGains,
    closed_loop: bool,
) -> Jacobians {
    let (s, c) = z.theta.sin_cos();
    let mut a_z = StateJacobian::identity();
    a_z[(IX, ITHETA)] = -dt * z.v * s;
    a_z[(IX, IV)] = dt * c;
    a_z[(IY, ITHETA)] = dt * z.v * c;
    a_z[(IY, IV)] = dt * s;
    a_z[(ITHETA, IOMEGA)] = dt;
    a_z[(IV, IV)] = 1.0 + dt * p.w_v[1];
    a_z[(IOMEGA, IOMEGA)] = 1.0 + dt * p.w_omega[1];
    if closed_loop {
        a_z[(IV, IV)] += dt * gains.k_v * p.w_v[0];
        a_z[(IOMEGA, ITHETA)] += dt * gains.k_theta * p.w_omega[0];
    }

    let mut a_w = ParamJacobian::zeros();
    a_w[(IV, 0)] = dt * u.v_cmd;
    a_w[(IV, 1)] = dt * z.v;
    a_w[(IOMEGA, 2)] = dt * u.omega_cmd;
    a_w[(IOMEGA, 3)] = dt * z.omega;
    Jacobians { a_z, a_w }
}

/// Derivative of [`step_mean`] with respect to the input.
pub fn input_jacobian(p: &ActuatorParams, dt: f64) -> InputJacobian {
    let mut b = InputJacobian::zeros();
    b[(IV, 0)] = dt * p.w_v[0];
    b[(IOMEGA, 1)] = dt * p.w_omega[0];
    b
}

/// Regression sample of one actuator channel: features `[command, state]`
/// and target `g = (ξ_{k+1} − ξ_k)/dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub x: [f64; 2],
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSample {
    pub speed: ChannelSample,
    pub turn: ChannelSample,
}

impl ActuatorSample {
    pub fn is_finite(&self) -> bool {
        [self.speed, self.turn]
            .iter()
            .all(|c| c.g.is_finite() && c.x.iter().all(|v| v.is_finite()))
    }
}

pub fn feature_and_target(
    xi_k: (f64, f64),
    u: &ControlInput,
    xi_next: (f64, f64),
    dt: f64,
) -> ActuatorSample {
    ActuatorSample {
        speed: ChannelSample {
            x: [u.v_cmd, xi_k.0],
            g: (xi_next.0 - xi_k.0) / dt,
        },
        turn: ChannelSample {
            x: [u.omega_cmd, xi_k.1],
            g: (xi_next.1 - xi_k.1) / dt,
        },
    }
}
