//! Oracles for run assessment, weighting and the tracking metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wblr_mpc::experience::{
    binomial_rejects, binomial_upper_tail, build_predictive_model, fit_recent_models, gaussian_two_sided_tail,
    outlier_accepted, run_weights, ChannelModels, ExperienceError, ExperienceStore, OutlierConfig, PerChannel,
    RunAssessment, StoredSample,
};
use wblr_mpc::metrics::{m_rmse, m_rmsz, median, percentile, quartiles, HorizonRecord};
use wblr_mpc::vehicle::{ActuatorSample, ChannelSample};
use wblr_mpc::wblr::{NigPosterior, PredictiveDensity};

/// `P(X ≥ k)` by direct summation of the binomial pmf.
fn tail_by_sum(k: u64, n: u64, p: f64) -> f64 {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += pmf;
        }
        pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    tail
}

#[test]
fn binomial_tail_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..500 {
        let n = rng.random_range(1..80u64);
        let k = rng.random_range(0..=n + 1);
        let p = rng.random_range(0.001..0.5);
        let a = binomial_upper_tail(k, n, p);
        let b = tail_by_sum(k, n, p);
        assert!((a - b).abs() < 1e-10, "n={n} k={k} p={p}: {a} vs {b}");
    }
}

#[test]
fn thirty_points_at_five_percent_reject_from_five() {
    assert!((tail_by_sum(4, 30, 0.05) - 0.061).abs() < 1e-3);
    assert!((tail_by_sum(5, 30, 0.05) - 0.016).abs() < 1e-3);
    for k in 0..=30 {
        assert_eq!(binomial_rejects(k, 30, 0.05, 0.05), k >= 5, "k = {k}");
    }
    // With the exact two-sided exceedance at r = 2 the threshold drops by one.
    let p = gaussian_two_sided_tail(2.0);
    assert!((p - 0.0455).abs() < 1e-4);
    for k in 0..=30 {
        assert_eq!(binomial_rejects(k, 30, p, 0.05), k >= 4, "k = {k}");
    }
}

fn prior() -> ChannelModels {
    let p = NigPosterior::first_order_lag(0.5, 1.0, 2.0, 0.25).unwrap();
    PerChannel::new(p.clone(), p)
}

/// A diffuse prior, so fitted models carry the noise level of the data
/// rather than the prior's mismatch with the plant.
fn diffuse_prior() -> ChannelModels {
    let p = NigPosterior::first_order_lag(0.5, 100.0, 2.0, 0.01).unwrap();
    PerChannel::new(p.clone(), p)
}

/// Samples from a first-order lag plant with a turn-command multiplier.
fn plant_samples(rng: &mut ChaCha8Rng, n: usize, turn_multiplier: f64) -> Vec<ActuatorSample> {
    let nv = Normal::new(0.0, 0.05).unwrap();
    let nw = Normal::new(0.0, 0.1).unwrap();
    let (wv, ww) = ([2.5, -2.5], [1.0 / 0.3, -1.0 / 0.3]);
    (0..n)
        .map(|_| {
            let (u, v) = (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5));
            let (uw, w) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            ActuatorSample {
                speed: ChannelSample {
                    x: [u, v],
                    g: wv[0] * u + wv[1] * v + nv.sample(rng),
                },
                turn: ChannelSample {
                    x: [uw, w],
                    g: ww[0] * turn_multiplier * uw + ww[1] * w + nw.sample(rng),
                },
            }
        })
        .collect()
}

fn store_with(runs: &[(u32, Vec<ActuatorSample>)]) -> ExperienceStore {
    let mut store = ExperienceStore::new(100);
    for (run, samples) in runs {
        for (i, s) in samples.iter().enumerate() {
            store
                .record(
                    *run,
                    i % 100,
                    StoredSample {
                        sample: *s,
                        timestamp: i as f64 * 0.1,
                    },
                )
                .unwrap();
        }
    }
    store
}

#[test]
fn store_rejects_unknown_vertices_and_keeps_runs_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let s = plant_samples(&mut rng, 2, 1.0);
    let mut store = ExperienceStore::new(10);
    let rec = |sample| StoredSample { sample, timestamp: 0.0 };
    store.record(1, 3, rec(s[0])).unwrap();
    store.record(2, 3, rec(s[1])).unwrap();
    assert_eq!(store.samples_at(1, 3), &[rec(s[0])]);
    assert_eq!(store.samples_at(2, 3), &[rec(s[1])]);
    assert!(matches!(
        store.record(1, 10, rec(s[0])),
        Err(ExperienceError::UnknownVertex { vertex: 10, .. })
    ));
}

#[test]
fn same_condition_runs_pass_and_oversteer_runs_fail_outlier_test() {
    let cfg = OutlierConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut within, mut total) = (0usize, 0usize);
    let mut accepted_same = 0;
    let mut rejected_over = 0;
    let trials = 40;
    for _ in 0..trials {
        let nominal_run = plant_samples(&mut rng, 30, 1.0);
        let oversteer_run = plant_samples(&mut rng, 30, 1.2);
        let live = plant_samples(&mut rng, 30, 1.0);
        let store = store_with(&[(1, nominal_run), (2, oversteer_run)]);
        let fits = fit_recent_models(&store, 0..=99, None, &diffuse_prior()).unwrap();
        assert_eq!(fits.len(), 2);
        let default_fits = fit_recent_models(&store, 0..=99, None, &prior()).unwrap();
        for s in &live {
            let p = default_fits[0].model.turn.predict_slice(&s.turn.x);
            total += 1;
            if ((s.turn.g - p.mean) / p.std()).abs() < 2.0 {
                within += 1;
            }
        }
        if outlier_accepted(&fits[0].model, &live, &cfg) {
            accepted_same += 1;
        }
        if !outlier_accepted(&fits[1].model, &live, &cfg) {
            rejected_over += 1;
        }
    }
    assert!(within as f64 / total as f64 >= 0.95, "{within}/{total}");
    // Under an exact Student-t predictive (dof ≈ 34) a point exceeds |Z| = 2
    // with probability ≈ 0.053, so each channel fails the k ≥ 4 test with
    // probability ≈ 0.074 and about 86% of identical runs pass both.
    assert!(accepted_same as f64 >= 0.7 * trials as f64, "accepted {accepted_same}/{trials}");
    assert!(rejected_over as f64 >= 0.9 * trials as f64, "rejected {rejected_over}/{trials}");
}

fn assessments(lls: &[f64], accepted: &[bool]) -> Vec<RunAssessment> {
    lls.iter()
        .zip(accepted)
        .enumerate()
        .map(|(i, (_, &a))| RunAssessment {
            run_id: i as u32 + 1,
            model: prior(),
            sample_count: 1,
            log_likelihood: f64::NEG_INFINITY,
            accepted: a,
            weight: 0.0,
        })
        .collect()
}

#[test]
fn runs_worse_than_the_prior_get_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let live = plant_samples(&mut rng, 30, 1.0);
    let good = plant_samples(&mut rng, 30, 1.0);
    let bad = plant_samples(&mut rng, 30, 2.0);
    let store = store_with(&[(1, good), (2, bad)]);
    let mut fits = fit_recent_models(&store, 0..=99, None, &prior()).unwrap();
    // Both pass the outlier stage here so only the prior comparison decides.
    for f in fits.iter_mut() {
        f.accepted = true;
    }
    let w = run_weights(fits, &live, &prior(), PredictiveDensity::StudentT);
    assert!(w[0].accepted && w[0].weight == 1.0);
    assert!(!w[1].accepted && w[1].weight == 0.0);
}

#[test]
fn predictive_model_is_transient_and_adds_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let store = store_with(&[(1, plant_samples(&mut rng, 60, 1.0)), (2, plant_samples(&mut rng, 60, 1.0))]);
    let fast = prior();
    let before = fast.clone();
    let mut a = assessments(&[0.0, 0.0], &[true, true]);
    a[0].weight = 1.0;
    a[1].weight = 0.25;
    let m = build_predictive_model(&fast, &store, &a, 10..=40).unwrap();
    assert_eq!(fast, before);
    // 31 vertices, one sample each from run 1 and from run 2.
    let expected_a = fast.speed.a() + 0.5 * (31.0 * 1.0 + 31.0 * 0.25);
    assert!((m.speed.a() - expected_a).abs() < 1e-12);
    assert!(m.turn.a() > fast.turn.a());

    let none = assessments(&[0.0, 0.0], &[false, false]);
    let m0 = build_predictive_model(&fast, &store, &none, 10..=40).unwrap();
    assert_eq!(m0, fast);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_lie_in_unit_interval_with_one_maximum(
        gs in prop::collection::vec(-1.0..1.0f64, 2..8),
        flags in prop::collection::vec(any::<bool>(), 8),
        seed in 0u64..500,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let live = plant_samples(&mut rng, 30, 1.0);
        // Runs differ by a turn multiplier drawn from gs.
        let runs: Vec<(u32, Vec<ActuatorSample>)> = gs
            .iter()
            .enumerate()
            .map(|(i, g)| (i as u32 + 1, plant_samples(&mut rng, 30, 1.0 + 0.3 * g)))
            .collect();
        let store = store_with(&runs);
        let mut fits = fit_recent_models(&store, 0..=99, None, &prior()).unwrap();
        for (f, a) in fits.iter_mut().zip(&flags) {
            f.accepted = *a;
        }
        let w = run_weights(fits, &live, &prior(), PredictiveDensity::StudentT);
        let accepted: Vec<&RunAssessment> = w.iter().filter(|a| a.accepted).collect();
        for a in &w {
            prop_assert!((0.0..=1.0).contains(&a.weight));
            if !a.accepted {
                prop_assert_eq!(a.weight, 0.0);
            }
        }
        if !accepted.is_empty() {
            let best = accepted.iter().map(|a| a.log_likelihood).fold(f64::NEG_INFINITY, f64::max);
            let first_best = accepted.iter().find(|a| a.log_likelihood == best).unwrap();
            prop_assert_eq!(first_best.weight, 1.0);
            for a in &accepted {
                prop_assert!((a.weight - (a.log_likelihood - best).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn percentiles_agree_with_order_statistics(
        data in prop::collection::vec(-100.0..100.0f64, 1..60),
        q in 0.0..=1.0f64,
    ) {
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        // Exact order statistics at q = i/(n−1).
        for i in 0..n {
            let qi = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            prop_assert!((percentile(&data, qi) - sorted[i]).abs() < 1e-9);
        }
        let p = percentile(&data, q);
        prop_assert!(p >= sorted[0] && p <= sorted[n - 1]);
        let below = sorted.iter().filter(|v| **v < p).count() as f64;
        let above = sorted.iter().filter(|v| **v > p).count() as f64;
        prop_assert!(below <= q * (n - 1) as f64 + 1.0);
        prop_assert!(above <= (1.0 - q) * (n - 1) as f64 + 1.0);
        let [q1, q2, q3] = quartiles(&data);
        prop_assert!(q1 <= q2 && q2 <= q3);
        if n % 2 == 1 {
            prop_assert_eq!(median(&data), sorted[n / 2]);
        } else {
            prop_assert!((median(&data) - 0.5 * (sorted[n / 2 - 1] + sorted[n / 2])).abs() < 1e-12);
        }
    }
}

#[test]
fn calibrated_predictions_give_unit_rmsz() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut sum = 0.0;
    let trials = 4000;
    for step in 0..trials {
        let std: Vec<f64> = (0..30).map(|q| 0.01 * (q + 1) as f64).collect();
        let mean: Vec<f64> = (0..30).map(|q| q as f64).collect();
        let realized: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + s * n.sample(&mut rng)).collect();
        let r = HorizonRecord {
            step,
            mean,
            std,
            realized,
        };
        sum += m_rmsz(&r).unwrap().powi(2);
    }
    assert!((sum / trials as f64 - 1.0).abs() < 0.02);

    let exact = HorizonRecord {
        step: 0,
        mean: vec![1.0, 2.0],
        std: vec![0.1, 0.1],
        realized: vec![1.0, 2.0],
    };
    assert_eq!(m_rmsz(&exact).unwrap(), 0.0);
    assert_eq!(m_rmse(&exact).unwrap(), 0.0);
    let off = HorizonRecord {
        realized: vec![1.3, 1.6],
        ..exact
    };
    assert!((m_rmse(&off).unwrap() - (0.5 * (0.09 + 0.16f64)).sqrt()).abs() < 1e-12);
    assert!((m_rmsz(&off).unwrap() - (0.5 * (9.0 + 16.0f64)).sqrt()).abs() < 1e-9);
}
