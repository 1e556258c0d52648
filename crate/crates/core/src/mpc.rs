//! Chance-constrained model predictive contouring control.
//!
//! The vehicle state is augmented with the reference progress `s`, driven by
//! the virtual input `v_ref`: `s' = s + dt·v_ref`. Each control step solves
//!
//! ```text
//!     min  ½ Σ_k Σ_i W_i r_i(x_k, u_k)²  +  Σ_k (c₁ ε_k + ½ c₂ ε_k²)
//!     s.t. x_{k+1} = f(x_k, u_k),  u_k ∈ U_k (tightened),
//!          ±e_c(x_k) + r_c σ_c,k − e_max ≤ ε_k,  ε_k ≥ 0
//! ```
//!
//! by a few Gauss–Newton SQP passes. The QP is condensed: states are
//! eliminated through the linearised rollout, so only input steps and slacks
//! remain and the dynamics hold exactly at every iterate. Constraint
//! standard deviations come from the belief propagated along the current
//! nominal and are frozen within a pass.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{directional_std, propagate_sequence, Belief, BeliefError, UncertainModel};
use crate::experience::ChannelModels;
use crate::path::Path;
use crate::qp::{QpError, QpProblem};
use crate::vehicle::{
    input_jacobian, jacobians, step_mean, wrap_angle, ActuatorParams, AncillaryGains, ControlInput, FullState, IOMEGA,
    ITHETA, IV, IX, IY,
};

const NX: usize = 6;
const NU: usize = 3;
const IS: usize = 5;
/// Halvings tried before a pass gives up and keeps its nominal.
const LINE_SEARCH_STEPS: usize = 6;

type AugMatrix = SMatrix<f64, NX, NX>;
type AugVector = SVector<f64, NX>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("initial state is not finite")]
    NonFiniteState,
    #[error("model is not finite")]
    NonFiniteModel,
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("belief propagation failed: {0}")]
    Belief(#[from] BeliefError),
    #[error("QP failed in pass {pass}: {source}")]
    Qp { pass: usize, source: QpError },
}

/// Path-following errors at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourErrors {
    /// Along the tangent, positive ahead of the reference.
    pub lag: f64,
    /// Along the left-hand normal, positive left of the path.
    pub contour: f64,
    pub heading_err: f64,
    pub speed_err: f64,
    pub turn_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProgress {
    pub s_ref: f64,
    pub v_ref: f64,
}

/// Errors of `z` against the path point at `progress.s_ref`. Returns `true`
/// alongside when `s_ref` had to be clamped into the path.
pub fn contour_errors(z: &FullState, path: &Path, progress: &ReferenceProgress) -> (ContourErrors, bool) {
    let s = progress.s_ref.clamp(0.0, path.length());
    let clamped = s != progress.s_ref;
    (errors_at(z, path, s, progress.v_ref), clamped)
}

fn errors_at(z: &FullState, path: &Path, s: f64, v_ref: f64) -> ContourErrors {
    let p = path.point_at(s);
    let d = z.position() - p.position;
    ContourErrors {
        lag: p.tangent.dot(&d),
        contour: p.normal.dot(&d),
        heading_err: wrap_angle(z.theta - p.heading),
        speed_err: z.v - v_ref,
        turn_err: z.omega - p.curvature * v_ref,
    }
}

/// `e_c + r_c·σ_c − e_max` with `σ_c` the position std along `normal`. The
/// constraint holds when the result is `≤ 0`. The solver applies it to both
/// `+e_c` and `−e_c`.
pub fn tighten_state_constraint(e_c: f64, belief: &Belief, normal: &Vector2<f64>, cfg: &ChanceConstraintConfig) -> f64 {
    e_c + cfg.r_c * directional_std(belief, normal) - cfg.e_c_max
}

/// `u + r·|K|·σ_e − bound`; the input is admissible when the result is `≤ 0`.
pub fn tighten_input_constraint(u: f64, gain: f64, sigma_e: f64, r: f64, bound: f64) -> f64 {
    u + r * gain.abs() * sigma_e - bound
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub lag: f64,
    pub contour: f64,
    pub heading: f64,
    pub speed: f64,
    pub turn: f64,
    pub input_v_cmd: f64,
    pub input_omega_cmd: f64,
    pub input_v_ref: f64,
    pub rate_v_cmd: f64,
    pub rate_omega_cmd: f64,
    pub rate_v_ref: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lag: 50.0,
            contour: 200.0,
            heading: 200.0,
            speed: 2.0,
            turn: 2.0,
            input_v_cmd: 1.0,
            input_omega_cmd: 1.0,
            input_v_ref: 50.0,
            rate_v_cmd: 10.0,
            rate_omega_cmd: 15.0,
            rate_v_ref: 5.0,
        }
    }
}

impl CostWeights {
    fn all(&self) -> [f64; 11] {
        [
            self.lag,
            self.contour,
            self.heading,
            self.speed,
            self.turn,
            self.input_v_cmd,
            self.input_omega_cmd,
            self.input_v_ref,
            self.rate_v_cmd,
            self.rate_omega_cmd,
            self.rate_v_ref,
        ]
    }

    fn input(&self) -> [f64; NU] {
        [self.input_v_cmd, self.input_omega_cmd, self.input_v_ref]
    }

    fn rate(&self) -> [f64; NU] {
        [self.rate_v_cmd, self.rate_omega_cmd, self.rate_v_ref]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChanceConstraintConfig {
    pub e_c_max: f64,
    pub r_c: f64,
    /// Quantiles for the speed and turn command bounds.
    pub r_u: [f64; 2],
    /// Input tightening is capped at this fraction of each bound's half
    /// range so the tightened set never empties.
    pub max_tightening_fraction: f64,
    pub slack_linear: f64,
    pub slack_quadratic: f64,
}

impl Default for ChanceConstraintConfig {
    fn default() -> Self {
        Self {
            e_c_max: 2.0,
            r_c: 1.0,
            r_u: [1.0, 1.0],
            max_tightening_fraction: 0.5,
            slack_linear: 1e4,
            slack_quadratic: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputBounds {
    pub v_cmd: [f64; 2],
    pub omega_cmd: [f64; 2],
    pub v_ref: [f64; 2],
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            v_cmd: [0.0, 3.0],
            omega_cmd: [-2.5, 2.5],
            v_ref: [0.0, 3.0],
        }
    }
}

impl InputBounds {
    fn get(&self, i: usize) -> [f64; 2] {
        [self.v_cmd, self.omega_cmd, self.v_ref][i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub dt: f64,
    pub horizon: usize,
    pub sqp_iterations: usize,
    /// Per-pass step limit on `[v_cmd, ω_cmd, v_ref]`.
    pub trust_region: [f64; NU],
    pub weights: CostWeights,
    pub chance: ChanceConstraintConfig,
    pub bounds: InputBounds,
    pub gains: AncillaryGains,
    /// Propagate covariance with the ancillary law in the loop.
    pub closed_loop_covariance: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 30,
            sqp_iterations: 3,
            trust_region: [0.5, 0.5, 0.5],
            weights: CostWeights::default(),
            chance: ChanceConstraintConfig::default(),
            bounds: InputBounds::default(),
            gains: AncillaryGains::default(),
            closed_loop_covariance: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 || self.sqp_iterations == 0 {
            return bad("horizon and sqp_iterations must be at least 1");
        }
        if self.weights.all().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("cost weights must be finite and nonnegative");
        }
        let c = &self.chance;
        if !(c.r_c >= 0.0 && c.r_u.iter().all(|r| *r >= 0.0) && c.e_c_max > 0.0) {
            return bad("quantiles must be nonnegative and e_c_max positive");
        }
        if !(c.slack_linear >= 0.0 && c.slack_quadratic > 0.0) {
            return bad("slack penalties must be positive");
        }
        if !(0.0..1.0).contains(&c.max_tightening_fraction) {
            return bad("max_tightening_fraction must lie in [0, 1)");
        }
        for i in 0..NU {
            let [lo, hi] = self.bounds.get(i);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad("input bounds must be finite with lower < upper");
            }
            if !(self.trust_region[i] > 0.0) {
                return bad("trust region must be positive");
            }
        }
        Ok(())
    }
}

/// Decision variables of one horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MpcInput {
    pub v_cmd: f64,
    pub omega_cmd: f64,
    pub v_ref: f64,
}

impl MpcInput {
    pub fn command(&self) -> ControlInput {
        ControlInput::new(self.v_cmd, self.omega_cmd)
    }

    fn to_array(self) -> [f64; NU] {
        [self.v_cmd, self.omega_cmd, self.v_ref]
    }

    fn from_array(a: [f64; NU]) -> Self {
        Self {
            v_cmd: a[0],
            omega_cmd: a[1],
            v_ref: a[2],
        }
    }
}

/// Inputs to reuse at the next control step.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub inputs: Vec<MpcInput>,
    /// Input applied at the previous step, used by the rate penalty.
    pub last_applied: MpcInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PassDiagnostics {
    pub qp_iterations: usize,
    /// Nonlinear cost at the nominal the pass linearised about.
    pub cost_before: f64,
    /// Cost predicted by the QP model after the step.
    pub predicted_cost: f64,
    pub kkt_residual: f64,
    pub max_slack: f64,
    pub max_step: f64,
    /// Whether any step variable sits on its trust-region limit.
    pub trust_region_active: bool,
    /// Fraction of the QP step accepted by the line search; 0 keeps the
    /// previous nominal.
    pub step_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveDiagnostics {
    pub passes: Vec<PassDiagnostics>,
    pub final_cost: f64,
    pub s_clamped: bool,
    pub solve_seconds: f64,
}

impl SolveDiagnostics {
    pub fn max_kkt_residual(&self) -> f64 {
        self.passes.iter().map(|p| p.kkt_residual).fold(0.0, f64::max)
    }

    pub fn qp_iterations(&self) -> usize {
        self.passes.iter().map(|p| p.qp_iterations).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub inputs: Vec<MpcInput>,
    /// Predicted mean states `z_0 … z_N`.
    pub states: Vec<FullState>,
    /// Reference progress `s_0 … s_N`.
    pub progress: Vec<f64>,
    pub beliefs: Vec<Belief>,
    /// Contour std `σ_c,k` along the path normal, `k = 0 … N`.
    pub contour_std: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

impl HorizonSolution {
    pub fn first_input(&self) -> ControlInput {
        self.inputs[0].command()
    }

    /// Shift by one step and hold the last input.
    pub fn warm_start(&self) -> WarmStart {
        let mut inputs: Vec<MpcInput> = self.inputs[1..].to_vec();
        inputs.push(*self.inputs.last().unwrap());
        WarmStart {
            inputs,
            last_applied: self.inputs[0],
        }
    }
}

pub struct SolveRequest<'a> {
    pub state: FullState,
    pub s0: f64,
    pub path: &'a Path,
    pub model: &'a ChannelModels,
    pub v_des: f64,
    pub warm_start: Option<&'a WarmStart>,
}

#[derive(Debug, Clone)]
pub struct Mpc {
    cfg: MpcConfig,
}

struct Linearisation {
    h: DMatrix<f64>,
    f: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    base_cost: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Mpc {
    pub fn new(cfg: MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn solve(&self, req: &SolveRequest) -> Result<HorizonSolution, MpcError> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let n = cfg.horizon;
        if !req.state.is_finite() || !req.s0.is_finite() || !req.v_des.is_finite() {
            return Err(MpcError::NonFiniteState);
        }
        let finite = |p: &crate::wblr::NigPosterior| p.to_flat().iter().all(|v| v.is_finite());
        if !finite(&req.model.speed) || !finite(&req.model.turn) {
            return Err(MpcError::NonFiniteModel);
        }
        let model = UncertainModel::from_posteriors(&req.model.speed, &req.model.turn);
        let s0 = req.s0.clamp(0.0, req.path.length());
        let mut diag = SolveDiagnostics {
            s_clamped: s0 != req.s0,
            ..Default::default()
        };

        let mut nominal = match req.warm_start {
            Some(w) if w.inputs.len() == n => w.inputs.clone(),
            _ => self.initial_guess(s0, req.path, &model.params, req.v_des),
        };
        let last_applied = req.warm_start.map(|w| w.last_applied).unwrap_or_else(|| {
            self.reference_input(&model.params, req.path.point_at(s0).curvature, req.v_des)
        });

        for pass in 0..cfg.sqp_iterations {
            self.project_into_bounds(&mut nominal);
            let (states, progress) = rollout(&req.state, s0, &nominal, &model.params, cfg.dt);
            let beliefs = self.beliefs(&req.state, &nominal, &model)?;
            let cost_before = self.cost(&states, &progress, &nominal, &beliefs, &last_applied, req.path, &model.params, req.v_des);
            let lin = self.linearise(&states, &progress, &nominal, &beliefs, &last_applied, req.path, &model.params, req.v_des);

            let scale = lin.h.diagonal().amax().max(1e-12);
            let mut h = &lin.h / scale;
            for i in 0..h.nrows() {
                h[(i, i)] += 1e-12;
            }
            let qp = QpProblem {
                h,
                f: &lin.f / scale,
                a: lin.a,
                b: lin.b,
            };
            let sol = qp.solve().map_err(|source| MpcError::Qp { pass, source })?;
            let kkt = qp.kkt_residual(&sol.x, &sol.multipliers);

            let mut max_step: f64 = 0.0;
            let mut tr_active = false;
            for j in 0..n * NU {
                let d = sol.x[j];
                max_step = max_step.max(d.abs());
                let lim = cfg.trust_region[j % NU];
                if (d.abs() - lim).abs() < 1e-9 && (lin.lo[j] == -lim || lin.hi[j] == lim) {
                    tr_active = true;
                }
            }
            // Backtrack on the nonlinear cost so passes never make it worse.
            let mut step_fraction = 0.0;
            let mut alpha = 1.0;
            for _ in 0..LINE_SEARCH_STEPS {
                let mut trial: Vec<MpcInput> = nominal
                    .iter()
                    .enumerate()
                    .map(|(k, u)| {
                        let mut a = u.to_array();
                        for (i, v) in a.iter_mut().enumerate() {
                            *v += alpha * sol.x[k * NU + i];
                        }
                        MpcInput::from_array(a)
                    })
                    .collect();
                self.project_into_bounds(&mut trial);
                let (st, pr) = rollout(&req.state, s0, &trial, &model.params, cfg.dt);
                let bl = self.beliefs(&req.state, &trial, &model)?;
                let c = self.cost(&st, &pr, &trial, &bl, &last_applied, req.path, &model.params, req.v_des);
                if c <= cost_before {
                    nominal = trial;
                    step_fraction = alpha;
                    break;
                }
                alpha *= 0.5;
            }
            let max_slack = (0..n).map(|k| sol.x[n * NU + k]).fold(0.0, f64::max);
            diag.passes.push(PassDiagnostics {
                qp_iterations: sol.iterations,
                cost_before,
                predicted_cost: lin.base_cost + sol.objective * scale,
                kkt_residual: kkt,
                max_slack,
                max_step,
                trust_region_active: tr_active,
                step_fraction,
            });
        }

        self.project_into_bounds(&mut nominal);
        let (states, progress) = rollout(&req.state, s0, &nominal, &model.params, cfg.dt);
        let beliefs = self.beliefs(&req.state, &nominal, &model)?;
        diag.final_cost = self.cost(&states, &progress, &nominal, &beliefs, &last_applied, req.path, &model.params, req.v_des);
        let contour_std = beliefs
            .iter()
            .zip(&progress)
            .map(|(b, &s)| directional_std(b, &req.path.point_at(s).normal))
            .collect();
        diag.solve_seconds = started.elapsed().as_secs_f64();
        Ok(HorizonSolution {
            inputs: nominal,
            states,
            progress,
            beliefs,
            contour_std,
            diagnostics: diag,
        })
    }

    fn reference_input(&self, p: &ActuatorParams, curvature: f64, v_des: f64) -> MpcInput {
        MpcInput {
            v_cmd: ActuatorParams::steady_state_input(p.w_v, v_des),
            omega_cmd: ActuatorParams::steady_state_input(p.w_omega, curvature * v_des),
            v_ref: v_des,
        }
    }

    fn initial_guess(&self, s0: f64, path: &Path, p: &ActuatorParams, v_des: f64) -> Vec<MpcInput> {
        let mut s = s0;
        (0..self.cfg.horizon)
            .map(|_| {
                let u = self.reference_input(p, path.point_at(s).curvature, v_des);
                s += self.cfg.dt * v_des;
                u
            })
            .collect()
    }

    fn project_into_bounds(&self, inputs: &mut [MpcInput]) {
        for u in inputs.iter_mut() {
            let mut a = u.to_array();
            for (i, v) in a.iter_mut().enumerate() {
                let [lo, hi] = self.cfg.bounds.get(i);
                *v = v.clamp(lo, hi);
            }
            *u = MpcInput::from_array(a);
        }
    }

    fn beliefs(&self, z0: &FullState, inputs: &[MpcInput], model: &UncertainModel) -> Result<Vec<Belief>, MpcError> {
        let cmds: Vec<ControlInput> = inputs.iter().map(|u| u.command()).collect();
        Ok(propagate_sequence(
            &Belief::certain(*z0),
            &cmds,
            model,
            &self.cfg.gains,
            self.cfg.dt,
            self.cfg.closed_loop_covariance,
        )?)
    }

    /// Tightened bounds on each input at step `k`.
    fn tightened_bounds(&self, belief: &Belief) -> [[f64; 2]; NU] {
        let c = &self.cfg.chance;
        let g = &self.cfg.gains;
        let sig = [belief.speed_std(), belief.heading_std()];
        let gain = [g.k_v, g.k_theta];
        let mut out = [[0.0; 2]; NU];
        for (i, o) in out.iter_mut().enumerate() {
            let [lo, hi] = self.cfg.bounds.get(i);
            let t = if i < 2 {
                let cap = c.max_tightening_fraction * 0.5 * (hi - lo);
                (c.r_u[i] * gain[i].abs() * sig[i]).min(cap)
            } else {
                0.0
            };
            *o = [lo + t, hi - t];
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn linearise(
        &self,
        states: &[FullState],
        progress: &[f64],
        inputs: &[MpcInput],
        beliefs: &[Belief],
        last: &MpcInput,
        path: &Path,
        params: &ActuatorParams,
        v_des: f64,
    ) -> Linearisation {
        let cfg = &self.cfg;
        let n = cfg.horizon;
        let nu = n * NU;
        let nv = nu + n;
        let dt = cfg.dt;
        let w = &cfg.weights;

        // Sensitivities S_k = ∂x_k/∂u, 6 × 3N, nonzero in the first 3k columns.
        let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
        sens.push(DMatrix::zeros(NX, nu));
        let bz = input_jacobian(params, dt);
        for k in 0..n {
            let j = jacobians(&states[k], &inputs[k].command(), params, dt, &AncillaryGains::ZERO, false);
            let mut a = AugMatrix::zeros();
            a.fixed_view_mut::<5, 5>(0, 0).copy_from(&j.a_z);
            a[(IS, IS)] = 1.0;
            let prev = &sens[k];
            let mut next = DMatrix::zeros(NX, nu);
            let used = k * NU;
            if used > 0 {
                let a_dyn = DMatrix::from_column_slice(NX, NX, a.as_slice());
                next.columns_mut(0, used).copy_from(&(a_dyn * prev.columns(0, used)));
            }
            for r in 0..5 {
                for c in 0..2 {
                    next[(r, used + c)] = bz[(r, c)];
                }
            }
            next[(IS, used + 2)] = dt;
            sens.push(next);
        }

        let rows = 5 * n + 2 * NU * n;
        let mut jac = DMatrix::<f64>::zeros(rows, nu);
        let mut res = DVector::<f64>::zeros(rows);
        let mut wts = DVector::<f64>::zeros(rows);
        let mut row = 0;
        let state_row = |jac: &mut DMatrix<f64>, res: &mut DVector<f64>, wts: &mut DVector<f64>, row: &mut usize, k: usize, g: AugVector, r: f64, wt: f64| {
            let used = k * NU;
            for c in 0..used {
                let mut acc = 0.0;
                for i in 0..NX {
                    if g[i] != 0.0 {
                        acc += g[i] * sens[k][(i, c)];
                    }
                }
                jac[(*row, c)] = acc;
            }
            res[*row] = r;
            wts[*row] = wt;
            *row += 1;
        };

        let mut contour_grad = Vec::with_capacity(n);
        let mut contour_val = Vec::with_capacity(n);
        for k in 1..=n {
            let z = &states[k];
            let s = progress[k];
            let v_ref = inputs[k - 1].v_ref;
            let p = path.point_at(s);
            let e = errors_at(z, path, s, v_ref);
            let kap = p.curvature;

            let mut g = AugVector::zeros();
            g[IX] = p.tangent.x;
            g[IY] = p.tangent.y;
            g[IS] = kap * e.contour - 1.0;
            state_row(&mut jac, &mut res, &mut wts, &mut row, k, g, e.lag, w.lag);

            let mut g = AugVector::zeros();
            g[IX] = p.normal.x;
            g[IY] = p.normal.y;
            g[IS] = -kap * e.lag;
            contour_grad.push(g);
            contour_val.push(e.contour);
            state_row(&mut jac, &mut res, &mut wts, &mut row, k, g, e.contour, w.contour);

            let mut g = AugVector::zeros();
            g[ITHETA] = 1.0;
            g[IS] = -kap;
            state_row(&mut jac, &mut res, &mut wts, &mut row, k, g, e.heading_err, w.heading);

            let mut g = AugVector::zeros();
            g[IV] = 1.0;
            state_row(&mut jac, &mut res, &mut wts, &mut row, k, g, e.speed_err, w.speed);
            jac[(row - 1, (k - 1) * NU + 2)] -= 1.0;

            let mut g = AugVector::zeros();
            g[IOMEGA] = 1.0;
            state_row(&mut jac, &mut res, &mut wts, &mut row, k, g, e.turn_err, w.turn);
            jac[(row - 1, (k - 1) * NU + 2)] -= kap;
        }
        let wi = w.input();
        let wr = w.rate();
        for k in 0..n {
            let kap = path.point_at(progress[k]).curvature;
            let r = self.reference_input(params, kap, v_des).to_array();
            let u = inputs[k].to_array();
            let prev = if k == 0 { last.to_array() } else { inputs[k - 1].to_array() };
            for i in 0..NU {
                jac[(row, k * NU + i)] = 1.0;
                res[row] = u[i] - r[i];
                wts[row] = wi[i];
                row += 1;
                jac[(row, k * NU + i)] = 1.0;
                if k > 0 {
                    jac[(row, (k - 1) * NU + i)] = -1.0;
                }
                res[row] = u[i] - prev[i];
                wts[row] = wr[i];
                row += 1;
            }
        }
        debug_assert_eq!(row, rows);

        let sw = wts.map(f64::sqrt);
        let mut jw = jac;
        for r in 0..rows {
            jw.row_mut(r).scale_mut(sw[r]);
        }
        let rw = res.component_mul(&sw);
        let hu = jw.tr_mul(&jw);
        let fu = jw.tr_mul(&rw);
        let base_cost = 0.5 * rw.norm_squared();

        let c = &cfg.chance;
        let mut h = DMatrix::<f64>::zeros(nv, nv);
        h.view_mut((0, 0), (nu, nu)).copy_from(&hu);
        let mut f = DVector::<f64>::zeros(nv);
        f.rows_mut(0, nu).copy_from(&fu);
        for k in 0..n {
            h[(nu + k, nu + k)] = c.slack_quadratic;
            f[nu + k] = c.slack_linear;
        }

        // Box rows for the input steps, then contour rows, then slack ≥ 0.
        let m = 2 * nu + 3 * n;
        let mut a = DMatrix::<f64>::zeros(m, nv);
        let mut b = DVector::<f64>::zeros(m);
        let mut lo = vec![0.0; nu];
        let mut hi = vec![0.0; nu];
        for k in 0..n {
            let tb = self.tightened_bounds(&beliefs[k]);
            let u = inputs[k].to_array();
            for i in 0..NU {
                let j = k * NU + i;
                let tr = cfg.trust_region[i];
                let l = tb[i][0] - u[i];
                let hgh = tb[i][1] - u[i];
                let l2 = l.max((-tr).min(hgh));
                let h2 = hgh.min(tr.max(l2));
                lo[j] = l2;
                hi[j] = h2;
                a[(2 * j, j)] = 1.0;
                b[2 * j] = h2;
                a[(2 * j + 1, j)] = -1.0;
                b[2 * j + 1] = -l2;
            }
        }
        for k in 1..=n {
            let g = contour_grad[k - 1];
            let sigma = directional_std(&beliefs[k], &path.point_at(progress[k]).normal);
            let margin = c.e_c_max - c.r_c * sigma;
            let used = (k) * NU;
            let r0 = 2 * nu + 2 * (k - 1);
            for col in 0..used {
                let mut acc = 0.0;
                for i in 0..NX {
                    if g[i] != 0.0 {
                        acc += g[i] * sens[k][(i, col)];
                    }
                }
                a[(r0, col)] = acc;
                a[(r0 + 1, col)] = -acc;
            }
            a[(r0, nu + k - 1)] = -1.0;
            a[(r0 + 1, nu + k - 1)] = -1.0;
            b[r0] = margin - contour_val[k - 1];
            b[r0 + 1] = margin + contour_val[k - 1];
        }
        for k in 0..n {
            let r = 2 * nu + 2 * n + k;
            a[(r, nu + k)] = -1.0;
        }

        Linearisation {
            h,
            f,
            a,
            b,
            base_cost,
            lo,
            hi,
        }
    }

    /// Nonlinear objective of a nominal trajectory, with each slack at the
    /// smallest value that satisfies its chance constraint.
    #[allow(clippy::too_many_arguments)]
    fn cost(
        &self,
        states: &[FullState],
        progress: &[f64],
        inputs: &[MpcInput],
        beliefs: &[Belief],
        last: &MpcInput,
        path: &Path,
        params: &ActuatorParams,
        v_des: f64,
    ) -> f64 {
        let w = &self.cfg.weights;
        let c = &self.cfg.chance;
        let mut j = 0.0;
        for k in 1..states.len() {
            let s = progress[k];
            let e = errors_at(&states[k], path, s, inputs[k - 1].v_ref);
            j += w.lag * e.lag.powi(2)
                + w.contour * e.contour.powi(2)
                + w.heading * e.heading_err.powi(2)
                + w.speed * e.speed_err.powi(2)
                + w.turn * e.turn_err.powi(2);
            let sigma = directional_std(&beliefs[k], &path.point_at(s).normal);
            let slack = (e.contour.abs() + c.r_c * sigma - c.e_c_max).max(0.0);
            j += 2.0 * c.slack_linear * slack + c.slack_quadratic * slack * slack;
        }
        let (wi, wr) = (w.input(), w.rate());
        for k in 0..inputs.len() {
            let r = self
                .reference_input(params, path.point_at(progress[k]).curvature, v_des)
                .to_array();
            let u = inputs[k].to_array();
            let prev = if k == 0 { last.to_array() } else { inputs[k - 1].to_array() };
            for i in 0..NU {
                j += wi[i] * (u[i] - r[i]).powi(2) + wr[i] * (u[i] - prev[i]).powi(2);
            }
        }
        0.5 * j
    }
}

/// Mean rollout of the augmented state.
pub fn rollout(z0: &FullState, s0: f64, inputs: &[MpcInput], p: &ActuatorParams, dt: f64) -> (Vec<FullState>, Vec<f64>) {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut progress = Vec::with_capacity(inputs.len() + 1);
    states.push(*z0);
    progress.push(s0);
    for u in inputs {
        let z = step_mean(states.last().unwrap(), &u.command(), p, dt);
        let s = progress.last().unwrap() + dt * u.v_ref;
        states.push(z);
        progress.push(s);
    }
    (states, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight() -> Path {
        Path::from_points(&[[0.0, 0.0], [50.0, 0.0]], false, 1, 0.25).unwrap()
    }

    #[test]
    fn on_path_errors_vanish() {
        let p = straight();
        let z = FullState::new(3.0, 0.0, 0.0, 2.0, 0.0);
        let (e, clamped) = contour_errors(&z, &p, &ReferenceProgress { s_ref: 3.0, v_ref: 2.0 });
        assert!(!clamped);
        assert_eq!(e.lag, 0.0);
        assert_eq!(e.contour, 0.0);
        assert_eq!(e.heading_err, 0.0);
        assert_eq!(e.speed_err, 0.0);
        assert_eq!(e.turn_err, 0.0);
    }

    #[test]
    fn left_offset_is_positive() {
        let p = straight();
        let z = FullState::new(3.0, 0.5, 0.0, 2.0, 0.0);
        let (e, _) = contour_errors(&z, &p, &ReferenceProgress { s_ref: 3.0, v_ref: 2.0 });
        assert_relative_eq!(e.contour, 0.5);
        assert_eq!(e.lag, 0.0);
        let (_, clamped) = contour_errors(&z, &p, &ReferenceProgress { s_ref: 80.0, v_ref: 2.0 });
        assert!(clamped);
    }

    #[test]
    fn input_tightening_arithmetic() {
        assert_relative_eq!(tighten_input_constraint(1.5, -5.0, 0.1, 1.0, 2.0), 0.0, epsilon = 1e-12);
        assert_eq!(tighten_input_constraint(1.0, -5.0, 0.0, 1.0, 2.0), -1.0);
        assert!(tighten_input_constraint(1.0, -8.0, 0.1, 1.0, 2.0) > tighten_input_constraint(1.0, -5.0, 0.1, 1.0, 2.0));
    }

    #[test]
    fn state_tightening_without_variance() {
        let b = Belief::certain(FullState::default());
        let cfg = ChanceConstraintConfig::default();
        assert_eq!(tighten_state_constraint(1.5, &b, &Vector2::new(0.0, 1.0), &cfg), -0.5);
    }

    #[test]
    fn default_weights_and_config_valid() {
        let c = MpcConfig::default();
        c.validate().unwrap();
        assert_eq!(c.horizon, 30);
        assert_eq!(c.sqp_iterations, 3);
        let mut bad = c;
        bad.weights.contour = -1.0;
        assert!(bad.validate().is_err());
    }
}
