//! Contouring MPC: error geometry, tightening arithmetic and solver
//! properties on small closed-loop problems.

use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wblr_mpc::belief::Belief;
use wblr_mpc::experience::ChannelModels;
use wblr_mpc::mpc::{
    contour_errors, tighten_input_constraint, tighten_state_constraint, ChanceConstraintConfig, HorizonSolution, Mpc,
    MpcConfig, ReferenceProgress, SolveRequest, WarmStart,
};
use wblr_mpc::path::{circle_points, Path};
use wblr_mpc::vehicle::{step_mean, ActuatorParams, FullState};
use wblr_mpc::wblr::NigPosterior;

const TAU: f64 = 0.5;

fn straight() -> Path {
    Path::from_points(&[[0.0, 0.0], [60.0, 0.0]], false, 1, 0.25).unwrap()
}

/// Lag model with the given parameter and noise scale on both channels.
fn model(v0: f64, sigma2: f64) -> ChannelModels {
    let ch = || {
        NigPosterior::new(
            DVector::from_column_slice(&[1.0 / TAU, -1.0 / TAU]),
            DMatrix::identity(2, 2) * v0,
            100.0,
            100.0 * sigma2,
        )
        .unwrap()
    };
    ChannelModels::new(ch(), ch())
}

fn exact_params() -> ActuatorParams {
    ActuatorParams::first_order(TAU, TAU, 0.0, 0.0)
}

fn solve(
    mpc: &Mpc,
    path: &Path,
    m: &ChannelModels,
    z: FullState,
    s0: f64,
    warm: Option<&WarmStart>,
) -> HorizonSolution {
    mpc.solve(&SolveRequest {
        state: z,
        s0,
        path,
        model: m,
        v_des: 2.0,
        warm_start: warm,
    })
    .unwrap()
}

#[test]
fn left_offset_on_straight_path_is_pure_contour_error() {
    let path = straight();
    let z = FullState::new(10.0, 0.5, 0.0, 2.0, 0.0);
    let (e, clamped) = contour_errors(&z, &path, &ReferenceProgress { s_ref: 10.0, v_ref: 2.0 });
    assert!(!clamped);
    assert!((e.contour - 0.5).abs() < 1e-12);
    assert!(e.lag.abs() < 1e-12);
    assert!(e.speed_err.abs() < 1e-12 && e.heading_err.abs() < 1e-12);
}

#[test]
fn contour_error_matches_dense_nearest_point_search() {
    let path = Path::from_points(&circle_points(25.0, 400), true, 1, 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let s = rng.random_range(1.0..24.0);
        let p = path.point_at(s);
        let off = rng.random_range(-0.8..0.8);
        let pos = p.position + p.normal * off;
        // Brute force: the closest of 200k samples, refined by golden section.
        let d2 = |t: f64| (path.point_at(t).position - pos).norm_squared();
        let n = 200_000;
        let mut best = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..=n {
            let t = path.length() * i as f64 / n as f64;
            let d = d2(t);
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        let h = path.length() / n as f64;
        let (mut lo, mut hi) = ((best - h).max(0.0), (best + h).min(path.length()));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..80 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if d2(a) < d2(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let s_star = 0.5 * (lo + hi);
        let z = FullState::new(pos.x, pos.y, p.heading, 2.0, 0.0);
        let (e, _) = contour_errors(&z, &path, &ReferenceProgress { s_ref: s_star, v_ref: 2.0 });
        assert!(e.lag.abs() < 1e-6, "lag {}", e.lag);
        assert!((e.contour.abs() - d2(s_star).sqrt()).abs() < 1e-6);
        assert!(e.contour * off >= 0.0, "contour {} on the wrong side of {off}", e.contour);
    }
}

#[test]
fn input_tightening_arithmetic() {
    let g = tighten_input_constraint(1.5, -5.0, 0.1, 1.0, 2.0);
    assert!(g.abs() < 1e-12, "effective bound should be 1.5, residual {g}");
    let mut b = Belief::certain(FullState::new(0.0, 0.0, 0.0, 1.0, 0.0));
    b.cov[(1, 1)] = 0.04;
    let cfg = ChanceConstraintConfig {
        e_c_max: 1.0,
        r_c: 2.0,
        ..Default::default()
    };
    let g = tighten_state_constraint(0.3, &b, &Vector2::new(0.0, 1.0), &cfg);
    assert!((g - (0.3 + 2.0 * 0.2 - 1.0)).abs() < 1e-12);
}

#[test]
fn straight_path_exact_model_tracks_closely() {
    let path = straight();
    let m = model(1e-6, 1e-6);
    let mpc = Mpc::new(MpcConfig::default()).unwrap();
    let p = exact_params();
    let mut z = FullState::new(0.0, 0.0, 0.0, 2.0, 0.0);
    let mut s = 0.0;
    let mut warm: Option<WarmStart> = None;
    for k in 0..30 {
        let sol = solve(&mpc, &path, &m, z, s, warm.as_ref());
        if k == 0 {
            // Holding 2 m/s through a lag with unit DC gain needs v_cmd = 2.
            assert!((sol.inputs[0].v_cmd - 2.0).abs() < 0.05, "v_cmd {}", sol.inputs[0].v_cmd);
            assert!((sol.inputs[0].v_ref - 2.0).abs() < 0.05, "v_ref {}", sol.inputs[0].v_ref);
        }
        z = step_mean(&z, &sol.first_input(), &p, 0.1);
        s = path.project(&z.position(), s, 2.0);
        assert!(path.lateral_offset(&z.position(), s).abs() < 0.05, "step {k}");
        warm = Some(sol.warm_start());
    }
    assert!((z.x - 6.0).abs() < 0.3, "travelled {}", z.x);
}

#[test]
fn zero_uncertainty_matches_deterministic_mpc() {
    let path = Path::from_points(&circle_points(25.0, 400), true, 2, 0.25).unwrap();
    let m = model(1e-30, 1e-30);
    let stochastic = Mpc::new(MpcConfig::default()).unwrap();
    let mut det_cfg = MpcConfig::default();
    det_cfg.chance.r_c = 0.0;
    det_cfg.chance.r_u = [0.0, 0.0];
    let deterministic = Mpc::new(det_cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let s = rng.random_range(0.0..20.0);
        let p = path.point_at(s);
        let pos = p.position + p.normal * rng.random_range(-0.3..0.3);
        let z = FullState::new(pos.x, pos.y, p.heading + rng.random_range(-0.2..0.2), rng.random_range(0.5..2.5), 0.0);
        let a = solve(&stochastic, &path, &m, z, s, None);
        let b = solve(&deterministic, &path, &m, z, s, None);
        for (ua, ub) in a.inputs.iter().zip(&b.inputs) {
            assert!((ua.v_cmd - ub.v_cmd).abs() < 1e-8);
            assert!((ua.omega_cmd - ub.omega_cmd).abs() < 1e-8);
            assert!((ua.v_ref - ub.v_ref).abs() < 1e-8);
        }
    }
}

#[test]
fn uncertainty_shrinks_the_admissible_corridor() {
    // Start 0.45 m left of the path with e_max = 0.5. Both plans keep the
    // tightened error inside the corridor.
    let path = straight();
    let mut cfg = MpcConfig::default();
    cfg.chance.e_c_max = 0.5;
    let mpc = Mpc::new(cfg).unwrap();
    let z = FullState::new(5.0, 0.45, 0.0, 2.0, 0.0);
    let confident = solve(&mpc, &path, &model(1e-6, 1e-6), z, 5.0, None);
    let uncertain = solve(&mpc, &path, &model(0.05, 0.02), z, 5.0, None);
    let late = |sol: &HorizonSolution| sol.contour_std[20];
    assert!(late(&uncertain) > 10.0 * late(&confident));
    for sol in [&confident, &uncertain] {
        assert_eq!(sol.diagnostics.passes.last().unwrap().max_slack, 0.0);
        for k in 1..sol.states.len() {
            assert!(sol.states[k].y.abs() + sol.contour_std[k] <= 0.5 + 1e-3, "step {k}");
        }
    }
}

fn random_request(rng: &mut ChaCha8Rng, path: &Path) -> (FullState, f64) {
    let s = rng.random_range(0.0..40.0);
    let p = path.point_at(s);
    let pos = p.position + p.normal * rng.random_range(-1.0..1.0);
    let z = FullState::new(
        pos.x,
        pos.y,
        p.heading + rng.random_range(-0.4..0.4),
        rng.random_range(0.0..3.0),
        rng.random_range(-0.5..0.5),
    );
    (z, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Feasible instances never pay slack, every QP solves to a small KKT
    /// residual and the planned states follow the mean dynamics.
    #[test]
    fn feasible_instances_use_no_slack(seed in 0u64..10_000) {
        let path = Path::from_points(&circle_points(25.0, 400), true, 2, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, s) = random_request(&mut rng, &path);
        let m = model(0.01, 0.01);
        let mpc = Mpc::new(MpcConfig::default()).unwrap();
        let sol = solve(&mpc, &path, &m, z, s, None);
        let d = &sol.diagnostics;
        prop_assert!(d.passes.iter().all(|p| p.max_slack < 1e-9), "{:?}", d.passes);
        prop_assert!(d.max_kkt_residual() < 1e-8);
        let params = ActuatorParams::first_order(TAU, TAU, 0.0, 0.0);
        for k in 0..sol.inputs.len() {
            let next = step_mean(&sol.states[k], &sol.inputs[k].command(), &params, 0.1);
            prop_assert!((next.to_vector() - sol.states[k + 1].to_vector()).amax() < 1e-9);
        }
    }

    /// The nonlinear cost never increases from pass to pass.
    #[test]
    fn cost_is_non_increasing_across_passes(seed in 0u64..10_000) {
        let path = Path::from_points(&circle_points(25.0, 400), true, 2, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, s) = random_request(&mut rng, &path);
        let mut cfg = MpcConfig::default();
        cfg.sqp_iterations = 5;
        let mpc = Mpc::new(cfg).unwrap();
        let sol = solve(&mpc, &path, &model(0.01, 0.01), z, s, None);
        let passes = &sol.diagnostics.passes;
        for w in passes.windows(2) {
            prop_assert!(w[1].cost_before <= w[0].cost_before, "{:?}", passes);
        }
        prop_assert!(sol.diagnostics.final_cost <= passes.last().unwrap().cost_before);
        // The predicted QP objective never exceeds the starting cost.
        // The QP prediction itself is not bounded by `cost_before`: the
        // nominal may sit outside the uncertainty-tightened input bounds,
        // which the nonlinear cost does not price.
    }
}
