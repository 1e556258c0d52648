//! EKF-style propagation of the state belief over the prediction horizon.
//!
//! Covariance update: `Σ' = A P Aᵀ + Q` with `A = [A_z, A_w]` and
//! `P = blockdiag(Σ^zz, Σ^ww)`. Parameters are held fixed over the horizon, so
//! `Σ^ww` re-enters every step without accumulating cross terms.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2};
use thiserror::Error;

use crate::vehicle::{
    jacobians, step_mean, ActuatorParams, AncillaryGains, ControlInput, FullState, StateJacobian,
    IOMEGA, ITHETA, IV, IX, IY,
};
use crate::wblr::NigPosterior;

const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("covariance is not positive semi-definite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("belief contains non-finite values")]
    NonFinite,
}

pub type StateCov = StateJacobian;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub mean: FullState,
    pub cov: StateCov,
}

impl Belief {
    pub fn certain(mean: FullState) -> Self {
        Self {
            mean,
            cov: StateCov::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if !self.mean.is_finite() || self.cov.iter().any(|v| !v.is_finite()) {
            return Err(BeliefError::NonFinite);
        }
        let min = min_eigenvalue(&self.cov);
        if min < -PSD_TOL {
            return Err(BeliefError::NotPsd(min));
        }
        Ok(())
    }

    pub fn speed_std(&self) -> f64 {
        self.cov[(IV, IV)].max(0.0).sqrt()
    }

    pub fn heading_std(&self) -> f64 {
        self.cov[(ITHETA, ITHETA)].max(0.0).sqrt()
    }

    pub fn turn_rate_std(&self) -> f64 {
        self.cov[(IOMEGA, IOMEGA)].max(0.0).sqrt()
    }
}

fn min_eigenvalue(m: &StateCov) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Block-diagonal parameter covariance, one `2×2` block `(b/a)V` per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCov(pub Matrix4<f64>);

impl ParamCov {
    pub fn zeros() -> Self {
        Self(Matrix4::zeros())
    }

    pub fn from_blocks(speed: Matrix2<f64>, turn: Matrix2<f64>) -> Self {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&speed);
        m.fixed_view_mut::<2, 2>(2, 2).copy_from(&turn);
        Self(m)
    }

    pub fn from_posteriors(speed: &NigPosterior, turn: &NigPosterior) -> Self {
        let block = |p: &NigPosterior| {
            let s = p.marginals().w_scale;
            Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)])
        };
        Self::from_blocks(block(speed), block(turn))
    }
}

/// Actuator-channel process noise, stored as the per-channel variances
/// `σ̂²_v`, `σ̂²_ω`; the covariance contribution is `dt²σ̂²` on the `(v, ω)`
/// diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    pub sigma2_v: f64,
    pub sigma2_omega: f64,
}

impl ProcessNoise {
    pub fn from_posteriors(speed: &NigPosterior, turn: &NigPosterior) -> Self {
        Self {
            sigma2_v: speed.marginals().sigma2_point(),
            sigma2_omega: turn.marginals().sigma2_point(),
        }
    }

    pub fn matrix(&self, dt: f64) -> StateCov {
        let mut q = StateCov::zeros();
        q[(IV, IV)] = dt * dt * self.sigma2_v.max(0.0);
        q[(IOMEGA, IOMEGA)] = dt * dt * self.sigma2_omega.max(0.0);
        q
    }
}

/// Everything the propagation needs from the learned model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertainModel {
    pub params: ActuatorParams,
    pub param_cov: ParamCov,
    pub noise: ProcessNoise,
}

impl UncertainModel {
    pub fn from_posteriors(speed: &NigPosterior, turn: &NigPosterior) -> Self {
        let noise = ProcessNoise::from_posteriors(speed, turn);
        let w = |p: &NigPosterior| [p.w_mean()[0], p.w_mean()[1]];
        Self {
            params: ActuatorParams {
                w_v: w(speed),
                w_omega: w(turn),
                sigma2_v: noise.sigma2_v,
                sigma2_omega: noise.sigma2_omega,
            },
            param_cov: ParamCov::from_posteriors(speed, turn),
            noise,
        }
    }

    /// A model with no uncertainty at all.
    pub fn certain(params: ActuatorParams) -> Self {
        Self {
            params,
            param_cov: ParamCov::zeros(),
            noise: ProcessNoise {
                sigma2_v: 0.0,
                sigma2_omega: 0.0,
            },
        }
    }
}

/// One-step propagation. The mean follows the nominal input; the ancillary
/// law only enters the covariance Jacobian when `closed_loop` is set.
pub fn propagate(
    b: &Belief,
    u: &ControlInput,
    model: &UncertainModel,
    gains: &AncillaryGains,
    dt: f64,
    closed_loop: bool,
) -> Result<Belief, BeliefError> {
    b.validate()?;
    Ok(propagate_unchecked(b, u, model, gains, dt, closed_loop))
}

/// [`propagate`] without the input PSD check, for inner loops that start
/// from a validated belief.
pub fn propagate_unchecked(
    b: &Belief,
    u: &ControlInput,
    model: &UncertainModel,
    gains: &AncillaryGains,
    dt: f64,
    closed_loop: bool,
) -> Belief {
    let j = jacobians(&b.mean, u, &model.params, dt, gains, closed_loop);
    let mut cov = j.a_z * b.cov * j.a_z.transpose()
        + j.a_w * model.param_cov.0 * j.a_w.transpose()
        + model.noise.matrix(dt);
    cov = 0.5 * (cov + cov.transpose());
    Belief {
        mean: step_mean(&b.mean, u, &model.params, dt),
        cov,
    }
}

/// Propagate along an input sequence, returning `[b_0, b_1, …, b_N]`.
pub fn propagate_sequence(
    b0: &Belief,
    inputs: &[ControlInput],
    model: &UncertainModel,
    gains: &AncillaryGains,
    dt: f64,
    closed_loop: bool,
) -> Result<Vec<Belief>, BeliefError> {
    b0.validate()?;
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(*b0);
    for u in inputs {
        let next = propagate_unchecked(out.last().unwrap(), u, model, gains, dt, closed_loop);
        out.push(next);
    }
    Ok(out)
}

/// Standard deviation of the position error along `direction` (unit vector).
pub fn directional_std(b: &Belief, direction: &Vector2<f64>) -> f64 {
    let p = Matrix2::new(
        b.cov[(IX, IX)],
        b.cov[(IX, IY)],
        b.cov[(IY, IX)],
        b.cov[(IY, IY)],
    );
    direction.dot(&(p * direction)).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SMatrix;

    fn params() -> ActuatorParams {
        ActuatorParams::first_order(0.4, 0.3, 0.0025, 0.01)
    }

    #[test]
    fn zero_sources_zero_covariance() {
        let b = Belief::certain(FullState::new(0.0, 0.0, 0.3, 2.0, 0.1));
        let out = propagate(
            &b,
            &ControlInput::new(2.0, 0.1),
            &UncertainModel::certain(params()),
            &AncillaryGains::default(),
            0.1,
            true,
        )
        .unwrap();
        assert_eq!(out.cov, StateCov::zeros());
    }

    #[test]
    fn lateral_variance_from_heading_variance() {
        // Straight motion along x: after one step the y-variance picks up
        // (dt·v)² σ_θ²; after two steps the heading variance is unchanged
        // and the y-variance is (2·dt·v)² σ_θ² when the ω channel is certain.
        let (dt, v, s2) = (0.1, 2.0, 0.04);
        let mut b = Belief::certain(FullState::new(0.0, 0.0, 0.0, v, 0.0));
        b.cov[(ITHETA, ITHETA)] = s2;
        let m = UncertainModel::certain(ActuatorParams::first_order(0.4, 0.3, 0.0, 0.0));
        let u = ControlInput::new(v, 0.0);
        let b1 = propagate(&b, &u, &m, &AncillaryGains::ZERO, dt, true).unwrap();
        assert_relative_eq!(b1.cov[(IY, IY)], (dt * v).powi(2) * s2, epsilon = 1e-15);
        let b2 = propagate(&b1, &u, &m, &AncillaryGains::ZERO, dt, true).unwrap();
        assert_relative_eq!(b2.cov[(IY, IY)], (2.0 * dt * v).powi(2) * s2, epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_psd() {
        let mut b = Belief::certain(FullState::default());
        b.cov[(0, 0)] = -1.0;
        let err = propagate(
            &b,
            &ControlInput::default(),
            &UncertainModel::certain(params()),
            &AncillaryGains::ZERO,
            0.1,
            true,
        );
        assert!(matches!(err, Err(BeliefError::NotPsd(_))));
    }

    #[test]
    fn directional_std_cases() {
        let mut b = Belief::certain(FullState::default());
        assert_eq!(directional_std(&b, &Vector2::new(1.0, 0.0)), 0.0);
        b.cov[(IX, IX)] = 0.09;
        b.cov[(IY, IY)] = 0.09;
        for a in [0.0, 0.4, 1.3, 2.9] {
            let d = Vector2::new(f64::cos(a), f64::sin(a));
            assert_relative_eq!(directional_std(&b, &d), 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn directional_std_matches_dense_quadratic_form() {
        let l = SMatrix::<f64, 5, 5>::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        let cov = l * l.transpose();
        let b = Belief {
            mean: FullState::default(),
            cov,
        };
        let d = Vector2::new(0.6, -0.8);
        let full = nalgebra::SVector::<f64, 5>::new(d.x, d.y, 0.0, 0.0, 0.0);
        let oracle = (full.transpose() * cov * full)[(0, 0)].sqrt();
        assert_relative_eq!(directional_std(&b, &d), oracle, epsilon = 1e-12);
    }

    #[test]
    fn param_cov_blocks() {
        let p = NigPosterior::first_order_lag(0.5, 1.0, 2.0, 0.25).unwrap();
        let pc = ParamCov::from_posteriors(&p, &p);
        assert_relative_eq!(pc.0[(0, 0)], 0.25);
        assert_relative_eq!(pc.0[(3, 3)], 0.25);
        assert_eq!(pc.0[(0, 2)], 0.0);
        let q = ProcessNoise::from_posteriors(&p, &p);
        assert_relative_eq!(q.sigma2_v, 0.5);
        let qm = q.matrix(0.1);
        assert_relative_eq!(qm[(IV, IV)], 0.005, epsilon = 1e-15);
        assert_eq!(qm[(IX, IX)] + qm[(IY, IY)] + qm[(ITHETA, ITHETA)], 0.0);
    }
}
