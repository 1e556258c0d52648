//! Learning ablation: the same scenario and seeds under the four
//! combinations of fast adaptation and long-term learning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::LearningFlags;
use crate::metrics::{median, MetricsError};
use crate::report::{build_report, Manifest, RunData, Summary};
use crate::sim::{run_scenario, Scenario, ScenarioOutput, SimError};

/// Configurations in table order.
pub const CONFIGURATIONS: [LearningFlags; 4] = [
    LearningFlags::NONE,
    LearningFlags {
        fast_adaptation: false,
        long_term: true,
    },
    LearningFlags {
        fast_adaptation: true,
        long_term: false,
    },
    LearningFlags::BOTH,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationResult {
    pub flags: LearningFlags,
    /// One summary per seed.
    pub summaries: Vec<Summary>,
    pub outputs: Vec<ScenarioOutput>,
}

impl ConfigurationResult {
    /// Median over seeds of a per-run value, for run `run` (1-based).
    fn across_seeds(&self, run: usize, f: impl Fn(&crate::report::RunSummary) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .summaries
            .iter()
            .filter_map(|s| s.runs.get(run - 1).and_then(&f))
            .collect();
        let m = median(&vals);
        m.is_finite().then_some(m)
    }

    pub fn post_median(&self, run: usize) -> Option<f64> {
        self.across_seeds(run, |r| r.post_disturbance_median)
    }

    pub fn pre_median(&self, run: usize) -> Option<f64> {
        self.across_seeds(run, |r| r.pre_disturbance_median)
    }

    /// Median of the per-run pre-disturbance medians over all runs and seeds.
    pub fn pre_median_all(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .summaries
            .iter()
            .flat_map(|s| s.runs.iter().filter_map(|r| r.pre_disturbance_median))
            .collect();
        let m = median(&vals);
        m.is_finite().then_some(m)
    }

    /// Fraction of steps with `|lateral error| > e_max` over all runs and
    /// seeds.
    pub fn exceedance_fraction(&self, e_max: f64) -> f64 {
        let (mut over, mut total) = (0usize, 0usize);
        for o in &self.outputs {
            for r in &o.runs {
                for t in &r.track {
                    total += 1;
                    if t.lateral_error.abs() > e_max {
                        over += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            over as f64 / total as f64
        }
    }

    pub fn step_seconds(&self) -> Vec<f64> {
        self.outputs
            .iter()
            .flat_map(|o| o.runs.iter().flat_map(|r| r.step_seconds.iter().copied()))
            .collect()
    }

    pub fn max_kkt_residual(&self) -> f64 {
        self.outputs
            .iter()
            .flat_map(|o| o.runs.iter().map(|r| r.max_kkt_residual))
            .fold(0.0, f64::max)
    }

    pub fn aborted_runs(&self) -> usize {
        self.outputs
            .iter()
            .flat_map(|o| o.runs.iter())
            .filter(|r| r.aborted.is_some())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub configurations: Vec<ConfigurationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub pre_disturbance_median: Option<f64>,
    pub post_disturbance_median_run_2: Option<f64>,
    pub post_disturbance_median_final: Option<f64>,
    pub exceedance_fraction: f64,
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn summarise(sc: &Scenario, out: &ScenarioOutput) -> Result<Summary, MetricsError> {
    let manifest = Manifest::new(sc, &out.runs);
    let data: Vec<RunData> = out.runs.iter().map(RunData::from).collect();
    Ok(build_report(&manifest, &data)?.summary)
}

/// Run every configuration for every seed. `progress` is called after each
/// scenario execution.
pub fn run_ablation(
    base: &Scenario,
    seeds: &[u64],
    mut progress: impl FnMut(LearningFlags, u64),
) -> Result<AblationResult, AblationError> {
    let mut configurations = Vec::with_capacity(CONFIGURATIONS.len());
    for flags in CONFIGURATIONS {
        let mut summaries = Vec::with_capacity(seeds.len());
        let mut outputs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let sc = Scenario {
                flags,
                seed,
                ..base.clone()
            };
            let out = run_scenario(&sc)?;
            summaries.push(summarise(&sc, &out)?);
            outputs.push(out);
            progress(flags, seed);
        }
        configurations.push(ConfigurationResult {
            flags,
            summaries,
            outputs,
        });
    }
    Ok(AblationResult {
        runs: base.runs(),
        seeds: seeds.to_vec(),
        configurations,
    })
}

impl AblationResult {
    pub fn configuration(&self, flags: LearningFlags) -> &ConfigurationResult {
        self.configurations
            .iter()
            .find(|c| c.flags == flags)
            .expect("every configuration is run")
    }

    pub fn rows(&self, e_max: f64) -> Vec<AblationRow> {
        self.configurations
            .iter()
            .map(|c| AblationRow {
                configuration: c.flags.label().to_string(),
                pre_disturbance_median: c.pre_median_all(),
                post_disturbance_median_run_2: c.post_median(2.min(self.runs)),
                post_disturbance_median_final: c.post_median(self.runs),
                exceedance_fraction: c.exceedance_fraction(e_max),
            })
            .collect()
    }
}

pub const ABLATION_HEADER: &str = "# wblr-ablation v1";

pub fn format_rows(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = format!(
        "{ABLATION_HEADER}\nconfiguration,pre_disturbance_median,post_disturbance_median_run_2,post_disturbance_median_final,exceedance_fraction\n"
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.configuration,
            opt(r.pre_disturbance_median),
            opt(r.post_disturbance_median_run_2),
            opt(r.post_disturbance_median_final),
            r.exceedance_fraction
        ));
    }
    s
}
