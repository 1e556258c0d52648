//! Simulated plant, operating conditions and scenario execution.
//!
//! The plant is the same unicycle with first-order actuators the controller
//! assumes, but with condition-specific parameters, a turn-command multiplier
//! and Gaussian noise on the actuator channels. A scenario runs a sequence of
//! runs over one path, sharing a single experience store.

use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{propagate_sequence, Belief, UncertainModel};
use crate::config::{ConfigError, ControllerConfig};
use crate::experience::{
    ChannelModels, ExperienceError, ExperienceStore, LearningFlags, ModelLearner, RunId, SectionWindows,
    StoredSample,
};
use crate::metrics::HorizonRecord;
use crate::mpc::{Mpc, SolveRequest, WarmStart};
use crate::path::{Path, PathError};
use crate::vehicle::{feature_and_target, wrap_angle, AncillaryGains, ControlInput, FullState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Experience(#[from] ExperienceError),
    #[error("path file: {0}")]
    PathFile(String),
}

/// Ground-truth actuator dynamics of one operating regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    pub name: String,
    pub true_w_v: [f64; 2],
    pub true_w_omega: [f64; 2],
    /// Applied to `ω_cmd` inside the plant.
    pub turn_multiplier: f64,
    pub noise_std_v: f64,
    pub noise_std_omega: f64,
}

impl OperatingCondition {
    pub const NOISE_STD_V: f64 = 0.05;
    pub const NOISE_STD_OMEGA: f64 = 0.1;

    pub fn first_order(name: &str, tau_v: f64, tau_omega: f64, turn_multiplier: f64) -> Self {
        Self {
            name: name.to_string(),
            true_w_v: [1.0 / tau_v, -1.0 / tau_v],
            true_w_omega: [1.0 / tau_omega, -1.0 / tau_omega],
            turn_multiplier,
            noise_std_v: Self::NOISE_STD_V,
            noise_std_omega: Self::NOISE_STD_OMEGA,
        }
    }

    pub fn nominal() -> Self {
        Self::first_order("nominal", 0.4, 0.3, 1.0)
    }

    /// Simulation stand-in for a heavier vehicle: slower actuators.
    pub fn loaded() -> Self {
        Self::first_order("loaded", 0.6, 0.45, 1.0)
    }

    pub fn loaded_understeer() -> Self {
        Self::first_order("loaded_understeer", 0.6, 0.45, 0.7)
    }

    pub fn loaded_oversteer() -> Self {
        Self::first_order("loaded_oversteer", 0.6, 0.45, 1.2)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nominal" => Some(Self::nominal()),
            "loaded" => Some(Self::loaded()),
            "loaded_understeer" => Some(Self::loaded_understeer()),
            "loaded_oversteer" => Some(Self::loaded_oversteer()),
            _ => None,
        }
    }

    /// Zero-input actuator update `ξ' = (1 + dt·w[1])ξ` contracts on both
    /// channels.
    pub fn is_stable(&self, dt: f64) -> bool {
        [self.true_w_v, self.true_w_omega]
            .iter()
            .all(|w| (1.0 + dt * w[1]).abs() < 1.0)
    }

    /// Steady-state turn rate under a constant command, with `extra`
    /// multiplying the command.
    pub fn steady_turn_rate(&self, omega_cmd: f64, extra: f64) -> f64 {
        -self.true_w_omega[0] * self.turn_multiplier * extra * omega_cmd / self.true_w_omega[1]
    }

    fn validate(&self) -> Result<(), SimError> {
        let vals = [
            self.true_w_v[0],
            self.true_w_v[1],
            self.true_w_omega[0],
            self.true_w_omega[1],
            self.turn_multiplier,
            self.noise_std_v,
            self.noise_std_omega,
        ];
        if vals.iter().any(|v| !v.is_finite()) || self.noise_std_v < 0.0 || self.noise_std_omega < 0.0 {
            return Err(SimError::Invalid(format!("condition {} has invalid parameters", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub vertex: usize,
    pub turn_multiplier: f64,
}

/// Turn-command multipliers switched on by path vertex. The latest entry at
/// or before the current vertex applies, on top of the condition's own
/// multiplier.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    pub entries: Vec<Disturbance>,
}

impl DisturbanceSchedule {
    pub fn multiplier_at(&self, vertex: usize) -> f64 {
        self.entries
            .iter()
            .filter(|d| d.vertex <= vertex)
            .max_by_key(|d| d.vertex)
            .map_or(1.0, |d| d.turn_multiplier)
    }

    pub fn first_vertex(&self) -> Option<usize> {
        self.entries.iter().map(|d| d.vertex).min()
    }

    fn validate(&self, num_vertices: usize) -> Result<(), SimError> {
        for d in &self.entries {
            if d.vertex >= num_vertices || !d.turn_multiplier.is_finite() {
                return Err(SimError::Invalid(format!(
                    "disturbance at vertex {} is invalid for a path with {} vertices",
                    d.vertex, num_vertices
                )));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One plant step. `ω_cmd` is scaled by the condition and schedule
/// multipliers; the actuator channels receive additive noise of the given
/// std (per unit time).
pub fn plant_step(
    z: &FullState,
    u: &ControlInput,
    cond: &OperatingCondition,
    schedule: &DisturbanceSchedule,
    vertex: usize,
    rng: &mut impl Rng,
    dt: f64,
) -> FullState {
    let mult = cond.turn_multiplier * schedule.multiplier_at(vertex);
    let eta_v = cond.noise_std_v * normal(rng);
    let eta_w = cond.noise_std_omega * normal(rng);
    let (s, c) = z.theta.sin_cos();
    let wv = cond.true_w_v;
    let ww = cond.true_w_omega;
    FullState {
        x: z.x + dt * z.v * c,
        y: z.y + dt * z.v * s,
        theta: wrap_angle(z.theta + dt * z.omega),
        v: z.v + dt * (wv[0] * u.v_cmd + wv[1] * z.v + eta_v),
        omega: z.omega + dt * (ww[0] * mult * u.omega_cmd + ww[1] * z.omega + eta_w),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationNoise {
    pub position_std: f64,
    pub heading_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub path: Path,
    /// One condition per run.
    pub conditions: Vec<OperatingCondition>,
    pub disturbance: DisturbanceSchedule,
    pub desired_speed: f64,
    pub flags: LearningFlags,
    pub seed: u64,
    pub localization: LocalizationNoise,
    pub controller: ControllerConfig,
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    /// Path file, relative to the scenario file.
    pub path: String,
    #[serde(default)]
    pub closed: bool,
    #[serde(default = "one")]
    pub laps: usize,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_speed")]
    pub desired_speed: f64,
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Condition names per run; the last one repeats.
    #[serde(default = "default_conditions")]
    pub conditions: Vec<String>,
    /// Extra named conditions beyond the presets.
    #[serde(default)]
    pub custom_conditions: Vec<OperatingCondition>,
    #[serde(default)]
    pub disturbance: Vec<Disturbance>,
    #[serde(default = "both")]
    pub learning: LearningFlags,
    #[serde(default)]
    pub localization: LocalizationNoise,
    #[serde(default)]
    pub controller: ControllerConfig,
}

fn one() -> usize {
    1
}
fn default_spacing() -> f64 {
    crate::path::DEFAULT_SPACING
}
fn default_speed() -> f64 {
    2.0
}
fn default_conditions() -> Vec<String> {
    vec!["nominal".to_string()]
}
fn both() -> LearningFlags {
    LearningFlags::BOTH
}

impl Scenario {
    pub fn from_file(path: &FsPath) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ScenarioFile =
            toml::from_str(&text).map_err(|e| SimError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(FsPath::new("."));
        Self::from_description(file, base)
    }

    pub fn from_description(file: ScenarioFile, base_dir: &FsPath) -> Result<Self, SimError> {
        let path_file = base_dir.join(&file.path);
        let text = std::fs::read_to_string(&path_file).map_err(|source| SimError::Io {
            path: path_file.clone(),
            source,
        })?;
        let points = crate::io::parse_path_file(&text).map_err(SimError::PathFile)?;
        let path = Path::from_points(&points, file.closed, file.laps, file.spacing)?;
        if file.runs == 0 {
            return Err(SimError::Invalid("runs must be at least 1".into()));
        }
        if file.conditions.is_empty() {
            return Err(SimError::Invalid("at least one condition is required".into()));
        }
        let mut conditions = Vec::with_capacity(file.runs);
        for i in 0..file.runs {
            let name = &file.conditions[i.min(file.conditions.len() - 1)];
            let c = file
                .custom_conditions
                .iter()
                .find(|c| &c.name == name)
                .cloned()
                .or_else(|| OperatingCondition::preset(name))
                .ok_or_else(|| SimError::Invalid(format!("unknown condition {name}")))?;
            conditions.push(c);
        }
        file.controller.validate()?;
        let sc = Scenario {
            name: file.name,
            path,
            conditions,
            disturbance: DisturbanceSchedule {
                entries: file.disturbance,
            },
            desired_speed: file.desired_speed,
            flags: file.learning,
            seed: file.seed,
            localization: file.localization,
            controller: file.controller,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn runs(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(SimError::Invalid(format!("scenario name {:?} is not usable as a directory", self.name)));
        }
        if !(self.desired_speed > 0.0 && self.desired_speed.is_finite()) {
            return Err(SimError::Invalid("desired_speed must be positive".into()));
        }
        if self.conditions.is_empty() {
            return Err(SimError::Invalid("at least one run is required".into()));
        }
        let dt = self.controller.mpc.dt;
        for c in &self.conditions {
            c.validate()?;
            if !c.is_stable(dt) {
                return Err(SimError::Invalid(format!("condition {} is unstable at dt = {dt}", c.name)));
            }
        }
        let l = &self.localization;
        if !(l.position_std >= 0.0 && l.heading_std >= 0.0) {
            return Err(SimError::Invalid("localization noise must be nonnegative".into()));
        }
        self.disturbance.validate(self.path.num_vertices())?;
        self.controller.validate()?;
        Ok(())
    }

    /// Section sizes implied by the horizon and desired speed.
    pub fn windows(&self) -> SectionWindows {
        let m = &self.controller.mpc;
        SectionWindows::for_horizon(
            self.controller.learning.recent_samples,
            m.horizon as f64 * m.dt,
            self.desired_speed,
            self.path.spacing(),
        )
    }
}

/// One row of a run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub vertex_id: usize,
    pub timestamp: f64,
    pub v: f64,
    pub omega: f64,
    pub v_cmd: f64,
    pub omega_cmd: f64,
    pub g_v: f64,
    pub g_omega: f64,
}

/// Ground-truth pose and tracking error per control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub step: usize,
    pub vertex_id: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub s: f64,
    pub lateral_error: f64,
    pub accepted_runs: usize,
    pub max_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub run_id: RunId,
    pub condition: String,
    pub log: Vec<LogRow>,
    pub track: Vec<TrackRow>,
    /// Model used by the controller at each logged step.
    pub models: Vec<ChannelModels>,
    pub max_kkt_residual: f64,
    /// Wall time of model building plus solve, per step. Not persisted.
    pub step_seconds: Vec<f64>,
    pub aborted: Option<String>,
}

impl RunOutput {
    pub fn lateral_errors(&self) -> Vec<f64> {
        self.track.iter().map(|t| t.lateral_error).collect()
    }

    pub fn horizon_records(&self, horizon: usize, dt: f64) -> Vec<HorizonRecord> {
        run_horizon_records(&self.log, &self.track, &self.models, horizon, dt)
    }
}

/// Horizon records rebuilt from logged rows: pose from the track, actuator
/// state and commands from the run log.
pub fn run_horizon_records(
    log: &[LogRow],
    track: &[TrackRow],
    models: &[ChannelModels],
    horizon: usize,
    dt: f64,
) -> Vec<HorizonRecord> {
    let n = log.len().min(track.len()).min(models.len());
    let states: Vec<FullState> = (0..n)
        .map(|i| FullState::new(track[i].x, track[i].y, track[i].theta, log[i].v, log[i].omega))
        .collect();
    let inputs: Vec<ControlInput> = log[..n].iter().map(|r| ControlInput::new(r.v_cmd, r.omega_cmd)).collect();
    horizon_records(&states, &inputs, &models[..n], horizon, dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub scenario: String,
    pub num_vertices: usize,
    pub runs: Vec<RunOutput>,
}

/// Seed of the random stream for one run.
pub fn run_seed(seed: u64, run: RunId) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u64::from(run).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Open-loop ω predictions over the horizon from every step, using the model
/// that was active at that step and the inputs that were actually applied.
/// `inputs[i]` is applied at `states[i]`; only windows whose realised values
/// are all in `states` are produced.
pub fn horizon_records(
    states: &[FullState],
    inputs: &[ControlInput],
    models: &[ChannelModels],
    horizon: usize,
    dt: f64,
) -> Vec<HorizonRecord> {
    let mut out = Vec::new();
    if horizon == 0 || states.len() <= horizon {
        return out;
    }
    for k in 0..(states.len() - horizon) {
        let m = UncertainModel::from_posteriors(&models[k].speed, &models[k].turn);
        let Ok(beliefs) = propagate_sequence(
            &Belief::certain(states[k]),
            &inputs[k..k + horizon],
            &m,
            &AncillaryGains::ZERO,
            dt,
            false,
        ) else {
            continue;
        };
        out.push(HorizonRecord {
            step: k,
            mean: beliefs[1..].iter().map(|b| b.mean.omega).collect(),
            std: beliefs[1..].iter().map(|b| b.turn_rate_std()).collect(),
            realized: states[k + 1..=k + horizon].iter().map(|z| z.omega).collect(),
        });
    }
    out
}

/// Runs of one scenario, executed in order against a shared store.
pub struct Simulator<'a> {
    sc: &'a Scenario,
    mpc: Mpc,
    store: ExperienceStore,
    next_run: RunId,
}

impl<'a> Simulator<'a> {
    pub fn new(sc: &'a Scenario) -> Result<Self, SimError> {
        sc.validate()?;
        let mpc = Mpc::new(sc.controller.mpc).map_err(|e| SimError::Invalid(e.to_string()))?;
        Ok(Self {
            sc,
            mpc,
            store: ExperienceStore::new(sc.path.num_vertices()),
            next_run: 1,
        })
    }

    pub fn store(&self) -> &ExperienceStore {
        &self.store
    }

    pub fn remaining(&self) -> usize {
        self.sc.runs() + 1 - self.next_run as usize
    }

    /// Execute the next run. Returns `None` once all runs are done.
    pub fn run_next(&mut self) -> Result<Option<RunOutput>, SimError> {
        if self.remaining() == 0 {
            return Ok(None);
        }
        let run = self.next_run;
        self.next_run += 1;
        self.execute(run).map(Some)
    }

    fn execute(&mut self, run: RunId) -> Result<RunOutput, SimError> {
        let sc = self.sc;
        let cfg = &sc.controller;
        let dt = cfg.mpc.dt;
        let path = &sc.path;
        let cond = &sc.conditions[run as usize - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(sc.seed, run));
        let mut learner = ModelLearner::new(cfg.learning.learner(sc.flags), cfg.prior.models().map_err(ConfigError::from)?);
        let span = sc.windows().upcoming_vertex_span;

        let start = path.point_at(0.0);
        let mut z = FullState::new(
            start.position.x,
            start.position.y,
            start.heading,
            sc.desired_speed,
            start.curvature * sc.desired_speed,
        );
        let max_steps = (1.5 * path.length() / (sc.desired_speed * dt)).ceil() as usize + 50;
        let end_s = path.length() - 0.5 * path.spacing();

        let mut out = RunOutput {
            run_id: run,
            condition: cond.name.clone(),
            log: Vec::new(),
            track: Vec::new(),
            models: Vec::new(),
            max_kkt_residual: 0.0,
            step_seconds: Vec::new(),
            aborted: None,
        };
        let mut s_true = 0.0;
        let mut s_meas = 0.0;
        let mut warm: Option<WarmStart> = None;
        let window = 2.0_f64.max(4.0 * sc.desired_speed * dt);

        for k in 0..max_steps {
            let pos_true = z.position();
            s_true = path.project(&pos_true, s_true, window);
            if s_true >= end_s {
                break;
            }
            let lateral = path.lateral_offset(&pos_true, s_true);

            let mut meas = z;
            let l = &sc.localization;
            if l.position_std > 0.0 {
                meas.x += l.position_std * normal(&mut rng);
                meas.y += l.position_std * normal(&mut rng);
            }
            if l.heading_std > 0.0 {
                meas.theta = wrap_angle(meas.theta + l.heading_std * normal(&mut rng));
            }
            s_meas = path.project(&meas.position(), s_meas, window);
            let vertex = path.vertex_at(s_meas);

            let t0 = Instant::now();
            let upcoming = vertex..=(vertex + span).min(path.num_vertices() - 1);
            let (model, report) = learner.predictive_model(&self.store, run, upcoming)?;
            let sol = self.mpc.solve(&SolveRequest {
                state: meas,
                s0: s_meas,
                path,
                model: &model,
                v_des: sc.desired_speed,
                warm_start: warm.as_ref(),
            });
            let elapsed = t0.elapsed().as_secs_f64();
            let sol = match sol {
                Ok(s) => s,
                Err(e) => {
                    out.aborted = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            out.step_seconds.push(elapsed);
            out.max_kkt_residual = out.max_kkt_residual.max(sol.diagnostics.max_kkt_residual());
            let u = sol.first_input();
            warm = Some(sol.warm_start());

            let next = plant_step(&z, &u, cond, &sc.disturbance, vertex, &mut rng, dt);
            let sample = feature_and_target((z.v, z.omega), &u, (next.v, next.omega), dt);
            let t = k as f64 * dt;
            self.store.record(run, vertex, StoredSample { sample, timestamp: t })?;
            learner.observe(vertex, sample)?;

            out.log.push(LogRow {
                vertex_id: vertex,
                timestamp: t,
                v: z.v,
                omega: z.omega,
                v_cmd: u.v_cmd,
                omega_cmd: u.omega_cmd,
                g_v: sample.speed.g,
                g_omega: sample.turn.g,
            });
            out.track.push(TrackRow {
                step: k,
                vertex_id: vertex,
                x: z.x,
                y: z.y,
                theta: z.theta,
                s: s_true,
                lateral_error: lateral,
                accepted_runs: report.runs_accepted,
                max_slack: sol.diagnostics.passes.last().map_or(0.0, |p| p.max_slack),
            });
            out.models.push(model);
            z = next;
            if !z.is_finite() {
                out.aborted = Some(format!("step {k}: plant state diverged"));
                break;
            }
        }
        if out.aborted.is_none() && s_true < end_s {
            out.aborted = Some(format!("run did not finish within {max_steps} steps"));
        }
        Ok(out)
    }
}

/// Execute every run of a scenario.
pub fn run_scenario(sc: &Scenario) -> Result<ScenarioOutput, SimError> {
    let mut sim = Simulator::new(sc)?;
    let mut runs = Vec::with_capacity(sc.runs());
    while let Some(r) = sim.run_next()? {
        runs.push(r);
    }
    Ok(ScenarioOutput {
        scenario: sc.name.clone(),
        num_vertices: sc.path.num_vertices(),
        runs,
    })
}
