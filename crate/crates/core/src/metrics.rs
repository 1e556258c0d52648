//! Prediction-quality and tracking metrics.
//!
//! Percentiles use linear interpolation between closest ranks: for sorted
//! data `x₀ ≤ … ≤ x_{n−1}` the `q`-quantile sits at position `q·(n−1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// M-RMSZ above this value flags an overconfident model.
pub const OVERCONFIDENT_RMSZ: f64 = 2.0;
/// Upper edge of the acceptable M-RMSZ band `[0, 1.5]`.
pub const ACCEPTABLE_RMSZ: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("horizon record is empty")]
    Empty,
    #[error("record fields have different lengths")]
    Length,
    #[error("predicted std at q = {0} is not positive")]
    ZeroStd(usize),
}

/// Open-loop predictions from step `k` under the inputs actually applied,
/// with the realised values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub step: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub realized: Vec<f64>,
}

impl HorizonRecord {
    fn check(&self) -> Result<usize, MetricsError> {
        let h = self.mean.len();
        if h == 0 {
            return Err(MetricsError::Empty);
        }
        if self.std.len() != h || self.realized.len() != h {
            return Err(MetricsError::Length);
        }
        Ok(h)
    }

    pub fn z_scores(&self) -> Result<Vec<f64>, MetricsError> {
        self.check()?;
        self.mean
            .iter()
            .zip(&self.std)
            .zip(&self.realized)
            .enumerate()
            .map(|(q, ((m, s), r))| {
                if *s > 0.0 {
                    Ok((r - m) / s)
                } else {
                    Err(MetricsError::ZeroStd(q))
                }
            })
            .collect()
    }
}

pub fn m_rmse(r: &HorizonRecord) -> Result<f64, MetricsError> {
    let h = r.check()?;
    let ss: f64 = r.realized.iter().zip(&r.mean).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / h as f64).sqrt())
}

pub fn m_rmsz(r: &HorizonRecord) -> Result<f64, MetricsError> {
    let z = r.z_scores()?;
    Ok((z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt())
}

pub fn is_overconfident(rmsz: f64) -> bool {
    rmsz > OVERCONFIDENT_RMSZ
}

/// Quantile of already sorted data. Returns NaN for empty input.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = pos - lo as f64;
            sorted[lo] + t * (sorted[hi] - sorted[lo])
        }
    }
}

/// Quantile of unsorted data; NaNs are dropped.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = data.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub fn median(data: &[f64]) -> f64 {
    percentile(data, 0.5)
}

/// 25th, 50th and 75th percentiles.
pub fn quartiles(data: &[f64]) -> [f64; 3] {
    let mut v: Vec<f64> = data.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    [
        percentile_sorted(&v, 0.25),
        percentile_sorted(&v, 0.5),
        percentile_sorted(&v, 0.75),
    ]
}

/// One lateral-error sample of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralSample {
    pub vertex: usize,
    pub error: f64,
}

/// Per-vertex quartiles of `|lateral error|` across runs. Within a run,
/// samples at the same vertex are averaged; vertices no run visited give
/// `None`.
pub fn lateral_percentiles(runs: &[Vec<LateralSample>], num_vertices: usize) -> Vec<Option<[f64; 3]>> {
    let mut per_vertex: Vec<Vec<f64>> = vec![Vec::new(); num_vertices];
    for run in runs {
        let mut sum = vec![0.0; num_vertices];
        let mut count = vec![0usize; num_vertices];
        for s in run {
            if s.vertex < num_vertices {
                sum[s.vertex] += s.error.abs();
                count[s.vertex] += 1;
            }
        }
        for v in 0..num_vertices {
            if count[v] > 0 {
                per_vertex[v].push(sum[v] / count[v] as f64);
            }
        }
    }
    per_vertex
        .iter()
        .map(|vals| (!vals.is_empty()).then(|| quartiles(vals)))
        .collect()
}

pub fn rms(data: &[f64]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: u32,
    pub condition: String,
    pub m_rmse: [f64; 3],
    pub m_rmsz: [f64; 3],
    pub overconfident_fraction: f64,
    pub lateral_rms: f64,
    pub lateral_max: f64,
    pub steps: usize,
}

impl MetricRow {
    /// Summarise one run from its horizon records and lateral errors.
    pub fn from_run(
        run_id: u32,
        condition: &str,
        records: &[HorizonRecord],
        lateral: &[f64],
    ) -> Result<Self, MetricsError> {
        let e: Vec<f64> = records.iter().map(m_rmse).collect::<Result<_, _>>()?;
        let z: Vec<f64> = records.iter().map(m_rmsz).collect::<Result<_, _>>()?;
        let over = if z.is_empty() {
            0.0
        } else {
            z.iter().filter(|v| is_overconfident(**v)).count() as f64 / z.len() as f64
        };
        Ok(Self {
            run_id,
            condition: condition.to_string(),
            m_rmse: quartiles(&e),
            m_rmsz: quartiles(&z),
            overconfident_fraction: over,
            lateral_rms: rms(lateral),
            lateral_max: lateral.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
            steps: lateral.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub const HEADER: [&'static str; 12] = [
        "run_id",
        "condition",
        "m_rmse_p25",
        "m_rmse_p50",
        "m_rmse_p75",
        "m_rmsz_p25",
        "m_rmsz_p50",
        "m_rmsz_p75",
        "overconfident_fraction",
        "lateral_rms",
        "lateral_max",
        "steps",
    ];

    pub fn to_records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.run_id.to_string(),
                    r.condition.clone(),
                    r.m_rmse[0].to_string(),
                    r.m_rmse[1].to_string(),
                    r.m_rmse[2].to_string(),
                    r.m_rmsz[0].to_string(),
                    r.m_rmsz[1].to_string(),
                    r.m_rmsz[2].to_string(),
                    r.overconfident_fraction.to_string(),
                    r.lateral_rms.to_string(),
                    r.lateral_max.to_string(),
                    r.steps.to_string(),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(mean: Vec<f64>, std: Vec<f64>, realized: Vec<f64>) -> HorizonRecord {
        HorizonRecord {
            step: 0,
            mean,
            std,
            realized,
        }
    }

    #[test]
    fn perfect_and_constant_error() {
        let r = rec(vec![1.0, 2.0, 3.0], vec![0.1; 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(m_rmse(&r).unwrap(), 0.0);
        assert_eq!(m_rmsz(&r).unwrap(), 0.0);
        let r = rec(vec![1.0, 2.0, 3.0], vec![0.05; 3], vec![1.1, 2.1, 2.9]);
        assert_relative_eq!(m_rmse(&r).unwrap(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(m_rmsz(&r).unwrap(), 2.0, epsilon = 1e-12);
        assert!(is_overconfident(2.0 + 1e-9));
    }

    #[test]
    fn zero_std_is_error() {
        let r = rec(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(m_rmsz(&r), Err(MetricsError::ZeroStd(1)));
        assert_eq!(m_rmse(&rec(vec![], vec![], vec![])), Err(MetricsError::Empty));
    }

    #[test]
    fn percentile_convention() {
        let d = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&d, 0.0), 1.0);
        assert_eq!(percentile(&d, 1.0), 4.0);
        assert_relative_eq!(percentile(&d, 0.25), 1.75);
        assert_relative_eq!(median(&d), 2.5);
        assert_eq!(percentile(&[7.0], 0.3), 7.0);
        assert!(percentile(&[], 0.5).is_nan());
    }

    #[test]
    fn single_and_identical_runs() {
        let run = vec![
            LateralSample { vertex: 0, error: -0.2 },
            LateralSample { vertex: 1, error: 0.4 },
            LateralSample { vertex: 1, error: 0.2 },
        ];
        let p = lateral_percentiles(std::slice::from_ref(&run), 3);
        assert_eq!(p[0], Some([0.2, 0.2, 0.2]));
        assert_relative_eq!(p[1].unwrap()[1], 0.3, epsilon = 1e-15);
        assert_eq!(p[2], None);
        let p = lateral_percentiles(&[run.clone(), run.clone(), run], 3);
        let q = p[1].unwrap();
        assert_eq!(q[2] - q[0], 0.0);
    }
}
