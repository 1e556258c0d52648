//! Run- and location-indexed experience, fast adaptation and long-term
//! learning.
//!
//! Every control step the live model is built in two stages:
//!
//! 1. *Fast adaptation*: the newest sample updates a recursively re-weighted
//!    prior of fixed strength `n0`.
//! 2. *Long-term learning*: each previous run gets a model fit on its data
//!    over the recent section of the path. Runs that would produce invalid
//!    confidence intervals (binomial outlier test) or that explain the recent
//!    live data worse than the fast prior are dropped; the rest weight their
//!    data over the upcoming section by relative likelihood.
//!
//! The long-term update is transient: only the fast prior carries over to the
//! next step.

use std::collections::{BTreeMap, VecDeque};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::vehicle::{ActuatorSample, ChannelSample};
use crate::wblr::{FeatureVector, NigPosterior, PredictiveDensity, WblrError, WeightedSample};

pub type RunId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperienceError {
    #[error("vertex {vertex} does not exist on a path with {count} vertices")]
    UnknownVertex { vertex: usize, count: usize },
    #[error("sample is not finite")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] WblrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Speed,
    Turn,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Speed, Channel::Turn];
}

/// A value per actuator channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub speed: T,
    pub turn: T,
}

impl<T> PerChannel<T> {
    pub fn new(speed: T, turn: T) -> Self {
        Self { speed, turn }
    }

    pub fn get(&self, c: Channel) -> &T {
        match c {
            Channel::Speed => &self.speed,
            Channel::Turn => &self.turn,
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(Channel, &T) -> Result<U, E>) -> Result<PerChannel<U>, E> {
        Ok(PerChannel {
            speed: f(Channel::Speed, &self.speed)?,
            turn: f(Channel::Turn, &self.turn)?,
        })
    }
}

impl ActuatorSample {
    pub fn channel(&self, c: Channel) -> &ChannelSample {
        match c {
            Channel::Speed => &self.speed,
            Channel::Turn => &self.turn,
        }
    }
}

impl ChannelSample {
    pub fn weighted(&self, weight: f64) -> WeightedSample {
        WeightedSample::new(FeatureVector::new(&self.x), self.g, weight)
    }
}

pub type ChannelModels = PerChannel<NigPosterior>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredSample {
    pub sample: ActuatorSample,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Default)]
struct RunRecord {
    by_vertex: Vec<Vec<StoredSample>>,
    count: usize,
}

/// Append-only store of actuator samples keyed by run and path vertex.
///
/// Writes need `&mut`, reads `&`, so a control step always works on a
/// consistent snapshot.
#[derive(Debug, Clone)]
pub struct ExperienceStore {
    num_vertices: usize,
    runs: BTreeMap<RunId, RunRecord>,
}

impl ExperienceStore {
    pub fn new(num_vertices: usize) -> Self {
        Self {
            num_vertices,
            runs: BTreeMap::new(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn record(&mut self, run: RunId, vertex: usize, sample: StoredSample) -> Result<(), ExperienceError> {
        if vertex >= self.num_vertices {
            return Err(ExperienceError::UnknownVertex {
                vertex,
                count: self.num_vertices,
            });
        }
        if !sample.sample.is_finite() || !sample.timestamp.is_finite() {
            return Err(ExperienceError::NonFinite);
        }
        let n = self.num_vertices;
        let rec = self.runs.entry(run).or_insert_with(|| RunRecord {
            by_vertex: vec![Vec::new(); n],
            count: 0,
        });
        rec.by_vertex[vertex].push(sample);
        rec.count += 1;
        Ok(())
    }

    pub fn run_ids(&self) -> impl Iterator<Item = RunId> + '_ {
        self.runs.keys().copied()
    }

    pub fn run_len(&self, run: RunId) -> usize {
        self.runs.get(&run).map_or(0, |r| r.count)
    }

    pub fn samples_at(&self, run: RunId, vertex: usize) -> &[StoredSample] {
        self.runs
            .get(&run)
            .and_then(|r| r.by_vertex.get(vertex))
            .map_or(&[], |v| v.as_slice())
    }

    /// Samples of `run` over a vertex range, in vertex order.
    pub fn samples_in(&self, run: RunId, section: RangeInclusive<usize>) -> impl Iterator<Item = &StoredSample> + '_ {
        let rec = self.runs.get(&run);
        let end = (*section.end()).min(self.num_vertices.saturating_sub(1));
        let start = *section.start();
        (start..=end)
            .filter(move |_| start <= end)
            .flat_map(move |v| rec.map_or(&[][..], |r| r.by_vertex[v].as_slice()))
    }
}

/// Sizes of the recent and upcoming sections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionWindows {
    pub recent_sample_count: usize,
    pub upcoming_vertex_span: usize,
}

impl SectionWindows {
    /// Upcoming span covering `horizon_time` at `speed` plus one vertex.
    pub fn for_horizon(recent_sample_count: usize, horizon_time: f64, speed: f64, spacing: f64) -> Self {
        Self {
            recent_sample_count,
            upcoming_vertex_span: (horizon_time * speed.abs() / spacing).ceil() as usize + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierConfig {
    /// Z-score treated as the upper bound on model error.
    pub z_threshold: f64,
    /// Significance of the binomial test.
    pub alpha: f64,
    /// Chance of a single exceedance under a valid model; defaults to the
    /// two-sided Gaussian tail at `z_threshold`.
    pub exceedance_prob: Option<f64>,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            z_threshold: 2.0,
            alpha: 0.05,
            exceedance_prob: None,
        }
    }
}

impl OutlierConfig {
    pub fn exceedance_prob(&self) -> f64 {
        self.exceedance_prob
            .unwrap_or_else(|| gaussian_two_sided_tail(self.z_threshold))
    }
}

/// `P(|Z| > r)` for a standard normal.
pub fn gaussian_two_sided_tail(r: f64) -> f64 {
    erfc(r / std::f64::consts::SQRT_2)
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let dist = Binomial::new(p, n).expect("probability in [0, 1]");
    dist.sf(k - 1)
}

/// Whether `k` exceedances out of `n` are more than expected by chance.
pub fn binomial_rejects(k: u64, n: u64, p: f64, alpha: f64) -> bool {
    binomial_upper_tail(k, n, p) < alpha
}

/// Predictive Z-scores of a channel's recent data under a model. A zero
/// predictive std maps to an infinite score.
pub fn z_scores<'a>(model: &'a NigPosterior, data: impl Iterator<Item = &'a ChannelSample> + 'a) -> impl Iterator<Item = f64> + 'a {
    data.map(move |s| {
        let p = model.predict_slice(&s.x);
        let std = p.std();
        if std > 0.0 && std.is_finite() {
            (s.g - p.mean) / std
        } else {
            f64::INFINITY
        }
    })
}

/// Binomial outlier test on one channel. Returns `true` when accepted.
pub fn channel_accepted(model: &NigPosterior, data: &[ChannelSample], cfg: &OutlierConfig) -> bool {
    if data.is_empty() {
        return true;
    }
    let k = z_scores(model, data.iter())
        .filter(|z| z.abs() > cfg.z_threshold || z.is_nan())
        .count() as u64;
    !binomial_rejects(k, data.len() as u64, cfg.exceedance_prob(), cfg.alpha)
}

/// Outlier rejection over both channels: a run is kept only if neither
/// channel shows more exceedances than expected.
pub fn outlier_accepted(model: &ChannelModels, recent: &[ActuatorSample], cfg: &OutlierConfig) -> bool {
    Channel::ALL.iter().all(|&c| {
        let data: Vec<ChannelSample> = recent.iter().map(|s| *s.channel(c)).collect();
        channel_accepted(model.get(c), &data, cfg)
    })
}

/// Sum of per-point log predictive densities over both channels.
pub fn log_likelihood(model: &ChannelModels, data: &[ActuatorSample], family: PredictiveDensity) -> f64 {
    let mut ll = 0.0;
    for s in data {
        for c in Channel::ALL {
            let cs = s.channel(c);
            let p = model.get(c).predict_slice(&cs.x);
            ll += match family {
                PredictiveDensity::StudentT => crate::wblr::student_t_ln_pdf(cs.g, p.mean, p.variance, p.dof),
                PredictiveDensity::Gaussian => crate::wblr::gaussian_ln_pdf(cs.g, p.mean, p.variance),
            };
        }
    }
    ll
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAssessment {
    pub run_id: RunId,
    pub model: ChannelModels,
    pub sample_count: usize,
    pub log_likelihood: f64,
    pub accepted: bool,
    pub weight: f64,
}

/// Fit a model per previous run from its samples over the recent section.
/// Runs without samples there are skipped.
pub fn fit_recent_models(
    store: &ExperienceStore,
    section: RangeInclusive<usize>,
    exclude: Option<RunId>,
    base_prior: &ChannelModels,
) -> Result<Vec<RunAssessment>, ExperienceError> {
    let mut out = Vec::new();
    for run in store.run_ids() {
        if Some(run) == exclude {
            continue;
        }
        let samples: Vec<&StoredSample> = store.samples_in(run, section.clone()).collect();
        if samples.is_empty() {
            continue;
        }
        let model = base_prior.try_map(|c, prior| {
            let data: Vec<WeightedSample> = samples.iter().map(|s| s.sample.channel(c).weighted(1.0)).collect();
            prior.update(&data)
        })?;
        out.push(RunAssessment {
            run_id: run,
            model,
            sample_count: samples.len(),
            log_likelihood: f64::NEG_INFINITY,
            accepted: false,
            weight: 0.0,
        });
    }
    Ok(out)
}

/// Outlier rejection for one assessment against the live recent data.
pub fn outlier_reject(assessment: &RunAssessment, recent: &[ActuatorSample], cfg: &OutlierConfig) -> bool {
    outlier_accepted(&assessment.model, recent, cfg)
}

/// Likelihood weights relative to the best accepted run.
///
/// Runs explaining the recent data worse than `prior_model` are rejected.
/// The best accepted run gets weight 1 (ties go to the lowest run id); the
/// others get `exp(LL_j − LL_best)`.
pub fn run_weights(
    mut assessments: Vec<RunAssessment>,
    recent: &[ActuatorSample],
    prior_model: &ChannelModels,
    family: PredictiveDensity,
) -> Vec<RunAssessment> {
    let prior_ll = log_likelihood(prior_model, recent, family);
    assessments.sort_by_key(|a| a.run_id);
    let mut best: Option<f64> = None;
    for a in assessments.iter_mut() {
        a.log_likelihood = log_likelihood(&a.model, recent, family);
        a.accepted = a.accepted && a.log_likelihood.is_finite() && a.log_likelihood >= prior_ll;
        if a.accepted && best.is_none_or(|b| a.log_likelihood > b) {
            best = Some(a.log_likelihood);
        }
    }
    for a in assessments.iter_mut() {
        a.weight = match (a.accepted, best) {
            (true, Some(b)) => (a.log_likelihood - b).exp().min(1.0),
            _ => 0.0,
        };
    }
    assessments
}

/// Fold the weighted upcoming-section data of accepted runs into the fast
/// prior. The prior itself is left untouched.
pub fn build_predictive_model(
    fast_prior: &ChannelModels,
    store: &ExperienceStore,
    assessments: &[RunAssessment],
    upcoming: RangeInclusive<usize>,
) -> Result<ChannelModels, ExperienceError> {
    let accepted: Vec<&RunAssessment> = assessments.iter().filter(|a| a.accepted && a.weight > 0.0).collect();
    if accepted.is_empty() {
        return Ok(fast_prior.clone());
    }
    Ok(fast_prior.try_map(|c, prior| {
        let mut data = Vec::new();
        for a in &accepted {
            data.extend(
                store
                    .samples_in(a.run_id, upcoming.clone())
                    .map(|s| s.sample.channel(c).weighted(a.weight)),
            );
        }
        prior.update(&data)
    })?)
}

/// Which learning mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningFlags {
    pub fast_adaptation: bool,
    pub long_term: bool,
}

impl LearningFlags {
    pub const NONE: Self = Self {
        fast_adaptation: false,
        long_term: false,
    };
    pub const BOTH: Self = Self {
        fast_adaptation: true,
        long_term: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.fast_adaptation, self.long_term) {
            (false, false) => "no_learning",
            (false, true) => "long_term",
            (true, false) => "fast_adaptation",
            (true, true) => "fast_and_long_term",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub n0: f64,
    pub recent_samples: usize,
    pub outlier: OutlierConfig,
    pub density: PredictiveDensity,
    pub flags: LearningFlags,
}

/// Diagnostics from building one predictive model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningReport {
    pub runs_considered: usize,
    pub runs_accepted: usize,
    pub upcoming_samples: usize,
}

/// Live learning state for one run.
#[derive(Debug, Clone)]
pub struct ModelLearner {
    cfg: LearnerConfig,
    base_prior: ChannelModels,
    fast_prior: ChannelModels,
    recent: VecDeque<(usize, ActuatorSample)>,
}

impl ModelLearner {
    pub fn new(cfg: LearnerConfig, base_prior: ChannelModels) -> Self {
        Self {
            cfg,
            fast_prior: base_prior.clone(),
            base_prior,
            recent: VecDeque::with_capacity(cfg.recent_samples + 1),
        }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn base_prior(&self) -> &ChannelModels {
        &self.base_prior
    }

    /// The recursively updated prior (the base prior when fast adaptation is
    /// off).
    pub fn fast_prior(&self) -> &ChannelModels {
        &self.fast_prior
    }

    pub fn recent(&self) -> impl Iterator<Item = &(usize, ActuatorSample)> {
        self.recent.iter()
    }

    /// Feed the newest sample, taken at `vertex`.
    pub fn observe(&mut self, vertex: usize, sample: ActuatorSample) -> Result<(), ExperienceError> {
        if !sample.is_finite() {
            return Err(ExperienceError::NonFinite);
        }
        if self.cfg.flags.fast_adaptation {
            let n0 = self.cfg.n0;
            self.fast_prior = self
                .fast_prior
                .try_map(|c, p| p.recursive_step(&sample.channel(c).weighted(1.0), n0))?;
        }
        self.recent.push_back((vertex, sample));
        while self.recent.len() > self.cfg.recent_samples {
            self.recent.pop_front();
        }
        Ok(())
    }

    /// Vertex span covered by the recent samples.
    pub fn recent_section(&self) -> Option<RangeInclusive<usize>> {
        let lo = self.recent.iter().map(|r| r.0).min()?;
        let hi = self.recent.iter().map(|r| r.0).max()?;
        Some(lo..=hi)
    }

    /// Model for the upcoming section. Does not modify the learner.
    pub fn predictive_model(
        &self,
        store: &ExperienceStore,
        current_run: RunId,
        upcoming: RangeInclusive<usize>,
    ) -> Result<(ChannelModels, LearningReport), ExperienceError> {
        let mut report = LearningReport::default();
        if !self.cfg.flags.long_term {
            return Ok((self.fast_prior.clone(), report));
        }
        let Some(section) = self.recent_section() else {
            return Ok((self.fast_prior.clone(), report));
        };
        let recent: Vec<ActuatorSample> = self.recent.iter().map(|r| r.1).collect();
        let mut assessments = fit_recent_models(store, section, Some(current_run), &self.base_prior)?;
        report.runs_considered = assessments.len();
        if assessments.is_empty() {
            return Ok((self.fast_prior.clone(), report));
        }
        for a in assessments.iter_mut() {
            a.accepted = outlier_reject(a, &recent, &self.cfg.outlier);
        }
        let weighted = run_weights(assessments, &recent, &self.base_prior, self.cfg.density);
        report.runs_accepted = weighted.iter().filter(|a| a.accepted).count();
        report.upcoming_samples = weighted
            .iter()
            .filter(|a| a.accepted)
            .map(|a| store.samples_in(a.run_id, upcoming.clone()).count())
            .sum();
        let model = build_predictive_model(&self.fast_prior, store, &weighted, upcoming)?;
        Ok((model, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample(g: f64) -> ActuatorSample {
        ActuatorSample {
            speed: ChannelSample { x: [1.0, 1.0], g },
            turn: ChannelSample { x: [0.5, 0.5], g },
        }
    }

    fn stored(g: f64, t: f64) -> StoredSample {
        StoredSample {
            sample: sample(g),
            timestamp: t,
        }
    }

    fn prior() -> ChannelModels {
        let p = NigPosterior::first_order_lag(0.5, 1.0, 2.0, 0.25).unwrap();
        PerChannel::new(p.clone(), p)
    }

    #[test]
    fn record_and_read_back() {
        let mut s = ExperienceStore::new(10);
        s.record(1, 3, stored(0.5, 0.1)).unwrap();
        s.record(2, 3, stored(-0.5, 0.1)).unwrap();
        assert_eq!(s.samples_at(1, 3), &[stored(0.5, 0.1)]);
        assert_eq!(s.samples_at(2, 3), &[stored(-0.5, 0.1)]);
        assert!(s.samples_at(3, 3).is_empty());
        assert_eq!(
            s.record(1, 10, stored(0.0, 0.0)),
            Err(ExperienceError::UnknownVertex { vertex: 10, count: 10 })
        );
        assert_eq!(s.record(1, 1, stored(f64::NAN, 0.0)), Err(ExperienceError::NonFinite));
        assert_eq!(s.samples_in(1, 0..=9).count(), 1);
        assert_eq!(s.samples_in(1, 5..=40).count(), 0);
    }

    #[test]
    fn no_previous_runs_gives_empty_assessment() {
        let s = ExperienceStore::new(10);
        assert!(fit_recent_models(&s, 0..=5, None, &prior()).unwrap().is_empty());
    }

    #[test]
    fn binomial_threshold_at_five_percent() {
        // Exact tails at n = 30, p = 0.05: P(X≥4) ≈ 0.0608, P(X≥5) ≈ 0.0156.
        assert_relative_eq!(binomial_upper_tail(4, 30, 0.05), 0.060771561308743435, epsilon = 1e-12);
        assert_relative_eq!(binomial_upper_tail(5, 30, 0.05), 0.01563551012853307, epsilon = 1e-12);
        for k in 0..=30 {
            assert_eq!(binomial_rejects(k, 30, 0.05, 0.05), k >= 5, "k = {k}");
        }
    }

    #[test]
    fn binomial_threshold_at_gaussian_tail() {
        let p = gaussian_two_sided_tail(2.0);
        assert_relative_eq!(p, 0.04550026389635839, epsilon = 1e-10);
        // P(X≥4) ≈ 0.0457 at this p, so four exceedances already reject.
        for k in 0..=30 {
            assert_eq!(binomial_rejects(k, 30, p, 0.05), k >= 4, "k = {k}");
        }
    }

    #[test]
    fn all_within_band_accepts() {
        let m = prior();
        let p = m.speed.predict_slice(&[1.0, 1.0]);
        let data: Vec<ChannelSample> = (0..30)
            .map(|i| ChannelSample {
                x: [1.0, 1.0],
                g: p.mean + 1.9 * p.std() * if i % 2 == 0 { 1.0 } else { -1.0 },
            })
            .collect();
        assert!(channel_accepted(&m.speed, &data, &OutlierConfig::default()));
        let far: Vec<ChannelSample> = data.iter().map(|s| ChannelSample { g: s.g + 10.0, ..*s }).collect();
        assert!(!channel_accepted(&m.speed, &far, &OutlierConfig::default()));
    }

    #[test]
    fn weights_normalised_and_bounded() {
        let m = prior();
        let mk = |id: RunId, shift: f64| {
            let p = NigPosterior::new(
                m.speed.w_mean().add_scalar(shift),
                m.speed.v().clone(),
                m.speed.a(),
                m.speed.b(),
            )
            .unwrap();
            RunAssessment {
                run_id: id,
                model: PerChannel::new(p.clone(), p),
                sample_count: 1,
                log_likelihood: f64::NEG_INFINITY,
                accepted: true,
                weight: 0.0,
            }
        };
        let recent: Vec<ActuatorSample> = (0..10).map(|_| sample(0.0)).collect();
        // A prior that fits badly so every run passes the prior check.
        let bad_prior = {
            let p = NigPosterior::new(
                m.speed.w_mean().add_scalar(3.0),
                m.speed.v().clone(),
                m.speed.a(),
                m.speed.b(),
            )
            .unwrap();
            PerChannel::new(p.clone(), p)
        };
        let out = run_weights(vec![mk(3, 0.2), mk(1, 0.0), mk(2, 0.0)], &recent, &bad_prior, PredictiveDensity::StudentT);
        assert_eq!(out.iter().map(|a| a.run_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(out[0].weight, 1.0);
        assert_eq!(out[1].weight, 1.0);
        assert!(out[2].weight > 0.0 && out[2].weight < 1.0);

        // Against the well-fitting prior, the shifted run is rejected.
        let out = run_weights(vec![mk(1, 0.0), mk(2, 0.5)], &recent, &m, PredictiveDensity::StudentT);
        assert!(out[0].accepted);
        assert!(!out[1].accepted);
        assert_eq!(out[1].weight, 0.0);
    }

    #[test]
    fn predictive_model_without_runs_is_fast_prior() {
        let cfg = LearnerConfig {
            n0: 100.0,
            recent_samples: 30,
            outlier: OutlierConfig::default(),
            density: PredictiveDensity::StudentT,
            flags: LearningFlags::BOTH,
        };
        let mut l = ModelLearner::new(cfg, prior());
        l.observe(0, sample(0.1)).unwrap();
        let store = ExperienceStore::new(10);
        let (m, rep) = l.predictive_model(&store, 0, 0..=5).unwrap();
        assert_eq!(&m, l.fast_prior());
        assert_eq!(rep.runs_considered, 0);
        assert_ne!(l.fast_prior(), l.base_prior());
    }

    #[test]
    fn recent_window_is_bounded() {
        let cfg = LearnerConfig {
            n0: 100.0,
            recent_samples: 30,
            outlier: OutlierConfig::default(),
            density: PredictiveDensity::StudentT,
            flags: LearningFlags::NONE,
        };
        let mut l = ModelLearner::new(cfg, prior());
        for k in 0..50 {
            l.observe(k, sample(0.0)).unwrap();
        }
        assert_eq!(l.recent().count(), 30);
        assert_eq!(l.recent_section(), Some(20..=49));
        assert_eq!(l.fast_prior(), l.base_prior());
    }
}
