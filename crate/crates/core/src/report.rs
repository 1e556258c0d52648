//! Tables and summaries computed from run data.
//!
//! Everything here works on the same fields that are persisted, so a report
//! rebuilt from files on disk matches the one produced during simulation.

use serde::{Deserialize, Serialize};

use crate::experience::{ChannelModels, LearningFlags};
use crate::metrics::{
    lateral_percentiles, m_rmse, m_rmsz, median, LateralSample, MetricRow, MetricTable, MetricsError,
    ACCEPTABLE_RMSZ, OVERCONFIDENT_RMSZ,
};
use crate::sim::{run_horizon_records, Disturbance, LogRow, RunOutput, Scenario, TrackRow};

pub const MANIFEST_FORMAT: &str = "wblr-manifest v1";
pub const SUMMARY_FORMAT: &str = "wblr-summary v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: u32,
    pub condition: String,
    pub aborted: Option<String>,
}

/// Scenario facts needed to interpret a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub scenario: String,
    pub seed: u64,
    pub desired_speed: f64,
    pub learning: LearningFlags,
    pub num_vertices: usize,
    pub horizon: usize,
    pub dt: f64,
    pub e_c_max: f64,
    pub disturbance: Vec<Disturbance>,
    pub runs: Vec<ManifestRun>,
}

impl Manifest {
    pub fn new(sc: &Scenario, runs: &[RunOutput]) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            scenario: sc.name.clone(),
            seed: sc.seed,
            desired_speed: sc.desired_speed,
            learning: sc.flags,
            num_vertices: sc.path.num_vertices(),
            horizon: sc.controller.mpc.horizon,
            dt: sc.controller.mpc.dt,
            e_c_max: sc.controller.mpc.chance.e_c_max,
            disturbance: sc.disturbance.entries.clone(),
            runs: runs
                .iter()
                .map(|r| ManifestRun {
                    run_id: r.run_id,
                    condition: r.condition.clone(),
                    aborted: r.aborted.clone(),
                })
                .collect(),
        }
    }

    pub fn disturbance_vertex(&self) -> Option<usize> {
        self.disturbance.iter().map(|d| d.vertex).min()
    }
}

/// The persisted part of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub run_id: u32,
    pub condition: String,
    pub log: Vec<LogRow>,
    pub track: Vec<TrackRow>,
    pub models: Vec<ChannelModels>,
}

impl From<&RunOutput> for RunData {
    fn from(r: &RunOutput) -> Self {
        Self {
            run_id: r.run_id,
            condition: r.condition.clone(),
            log: r.log.clone(),
            track: r.track.clone(),
            models: r.models.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: u32,
    pub condition: String,
    pub steps: usize,
    pub aborted: Option<String>,
    pub lateral_rms: Option<f64>,
    pub lateral_max: f64,
    pub lateral_median: Option<f64>,
    /// Median `|lateral error|` before and after the first disturbance
    /// vertex.
    pub pre_disturbance_median: Option<f64>,
    pub post_disturbance_median: Option<f64>,
    pub exceedance_fraction: Option<f64>,
    pub m_rmse_median: Option<f64>,
    pub m_rmsz_median: Option<f64>,
    pub overconfident_fraction: f64,
    pub one_step_z_exceed_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub scenario: String,
    pub seed: u64,
    pub learning: String,
    pub acceptable_rmsz_band: [f64; 2],
    pub overconfident_rmsz: f64,
    pub runs: Vec<RunSummary>,
    pub lateral_exceedance_fraction: Option<f64>,
    pub one_step_z_exceed_fraction: Option<f64>,
    pub median_m_rmsz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: MetricTable,
    pub summary: Summary,
    pub percentiles: Vec<Option<[f64; 3]>>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn fraction(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn build_report(manifest: &Manifest, runs: &[RunData]) -> Result<Report, MetricsError> {
    let mut table = MetricTable::default();
    let mut summaries = Vec::new();
    let mut lateral_runs = Vec::new();
    let (mut exceed, mut total) = (0usize, 0usize);
    let (mut z_exceed, mut z_total) = (0usize, 0usize);
    let mut all_rmsz = Vec::new();
    let dist = manifest.disturbance_vertex();

    for r in runs {
        let records = run_horizon_records(&r.log, &r.track, &r.models, manifest.horizon, manifest.dt);
        let lateral: Vec<f64> = r.track.iter().map(|t| t.lateral_error).collect();
        let row = MetricRow::from_run(r.run_id, &r.condition, &records, &lateral)?;
        let rmsz: Vec<f64> = records.iter().map(m_rmsz).collect::<Result<_, _>>()?;
        let rmse: Vec<f64> = records.iter().map(m_rmse).collect::<Result<_, _>>()?;
        let mut zs = 0;
        for rec in &records {
            let z = rec.z_scores()?;
            if z[0].abs() > 2.0 {
                zs += 1;
            }
        }
        z_exceed += zs;
        z_total += records.len();
        all_rmsz.extend_from_slice(&rmsz);

        let abs: Vec<f64> = lateral.iter().map(|v| v.abs()).collect();
        let over = abs.iter().filter(|v| **v > manifest.e_c_max).count();
        exceed += over;
        total += abs.len();
        let split = |pre: bool| -> Option<f64> {
            let d = dist?;
            let vals: Vec<f64> = r
                .track
                .iter()
                .filter(|t| (t.vertex_id < d) == pre)
                .map(|t| t.lateral_error.abs())
                .collect();
            finite(median(&vals))
        };
        summaries.push(RunSummary {
            run_id: r.run_id,
            condition: r.condition.clone(),
            steps: r.track.len(),
            aborted: manifest
                .runs
                .iter()
                .find(|m| m.run_id == r.run_id)
                .and_then(|m| m.aborted.clone()),
            lateral_rms: finite(row.lateral_rms),
            lateral_max: row.lateral_max,
            lateral_median: finite(median(&abs)),
            pre_disturbance_median: split(true),
            post_disturbance_median: split(false),
            exceedance_fraction: fraction(over, abs.len()),
            m_rmse_median: finite(median(&rmse)),
            m_rmsz_median: finite(median(&rmsz)),
            overconfident_fraction: row.overconfident_fraction,
            one_step_z_exceed_fraction: fraction(zs, records.len()),
        });
        table.rows.push(row);
        lateral_runs.push(
            r.track
                .iter()
                .map(|t| LateralSample {
                    vertex: t.vertex_id,
                    error: t.lateral_error,
                })
                .collect::<Vec<_>>(),
        );
    }
    Ok(Report {
        table,
        summary: Summary {
            format: SUMMARY_FORMAT.to_string(),
            scenario: manifest.scenario.clone(),
            seed: manifest.seed,
            learning: manifest.learning.label().to_string(),
            acceptable_rmsz_band: [0.0, ACCEPTABLE_RMSZ],
            overconfident_rmsz: OVERCONFIDENT_RMSZ,
            runs: summaries,
            lateral_exceedance_fraction: fraction(exceed, total),
            one_step_z_exceed_fraction: fraction(z_exceed, z_total),
            median_m_rmsz: finite(median(&all_rmsz)),
        },
        percentiles: lateral_percentiles(&lateral_runs, manifest.num_vertices),
    })
}
