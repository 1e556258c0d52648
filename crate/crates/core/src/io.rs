//! File formats: path files, run logs and run directories.
//!
//! Every file starts with a `# <format> v<N>` line. Numbers are written with
//! Rust's shortest round-trip formatting, so reading a file back gives the
//! identical `f64` values.
//!
//! Run directory layout under an output root:
//!
//! ```text
//! runs/<scenario>/manifest.json
//! runs/<scenario>/<run_id>.csv          vertex_id,timestamp,v,omega,v_cmd,omega_cmd,g_v,g_omega
//! runs/<scenario>/<run_id>.track.csv    ground-truth pose and lateral error
//! runs/<scenario>/<run_id>.models.csv   model used by the controller per step
//! runs/<scenario>/metrics.csv
//! runs/<scenario>/lateral_percentiles.csv
//! runs/<scenario>/summary.json
//! ```

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::experience::{ChannelModels, PerChannel};
use crate::metrics::MetricTable;
use crate::report::{Manifest, Report, RunData, MANIFEST_FORMAT};
use crate::sim::{LogRow, TrackRow};
use crate::wblr::NigPosterior;

pub const PATH_HEADER: &str = "# wblr-path v1";
pub const RUN_LOG_HEADER: &str = "# wblr-run-log v1";
pub const TRACK_HEADER: &str = "# wblr-track v1";
pub const MODELS_HEADER: &str = "# wblr-models v1";
pub const METRICS_HEADER: &str = "# wblr-metrics v1";
pub const PERCENTILES_HEADER: &str = "# wblr-lateral-percentiles v1";

pub const RUN_LOG_COLUMNS: [&str; 8] = ["vertex_id", "timestamp", "v", "omega", "v_cmd", "omega_cmd", "g_v", "g_omega"];
pub const TRACK_COLUMNS: [&str; 9] = [
    "step",
    "vertex_id",
    "x",
    "y",
    "theta",
    "s",
    "lateral_error",
    "accepted_runs",
    "max_slack",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &FsPath) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &FsPath, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Split off the version line and check it.
fn body<'a>(text: &'a str, header: &str) -> Result<&'a str, String> {
    let mut lines = text.splitn(2, '\n');
    let first = lines.next().unwrap_or("").trim_end_matches('\r');
    if first != header {
        return Err(format!("expected header {header:?}, found {first:?}"));
    }
    Ok(lines.next().unwrap_or(""))
}

fn csv_rows(text: &str, columns: &[&str]) -> Result<Vec<csv::StringRecord>, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != columns {
        return Err(format!("expected columns {columns:?}, found {:?}", headers.iter().collect::<Vec<_>>()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != columns.len() {
            return Err(format!("row has {} fields, expected {}", rec.len(), columns.len()));
        }
        out.push(rec);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, String> {
    let s = &rec[i];
    s.parse()
        .map_err(|_| format!("cannot parse {s:?} in line {}", rec.position().map_or(0, |p| p.line())))
}

fn write_csv(header: &str, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    let data = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input");
    format!("{header}\n{data}")
}

/// Parse a path file: version line, `x,y` header, one point per row.
pub fn parse_path_file(text: &str) -> Result<Vec<[f64; 2]>, String> {
    let rows = csv_rows(body(text, PATH_HEADER)?, &["x", "y"])?;
    let mut pts = Vec::with_capacity(rows.len());
    for r in &rows {
        let p = [field::<f64>(r, 0)?, field::<f64>(r, 1)?];
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err("non-finite coordinate".into());
        }
        pts.push(p);
    }
    if pts.len() < 2 {
        return Err("a path needs at least two points".into());
    }
    Ok(pts)
}

pub fn format_path_file(points: &[[f64; 2]]) -> String {
    write_csv(
        PATH_HEADER,
        &["x", "y"],
        points.iter().map(|p| vec![p[0].to_string(), p[1].to_string()]),
    )
}

pub fn format_run_log(rows: &[LogRow]) -> String {
    write_csv(
        RUN_LOG_HEADER,
        &RUN_LOG_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.vertex_id.to_string(),
                r.timestamp.to_string(),
                r.v.to_string(),
                r.omega.to_string(),
                r.v_cmd.to_string(),
                r.omega_cmd.to_string(),
                r.g_v.to_string(),
                r.g_omega.to_string(),
            ]
        }),
    )
}

pub fn parse_run_log(text: &str) -> Result<Vec<LogRow>, String> {
    csv_rows(body(text, RUN_LOG_HEADER)?, &RUN_LOG_COLUMNS)?
        .iter()
        .map(|r| {
            Ok(LogRow {
                vertex_id: field(r, 0)?,
                timestamp: field(r, 1)?,
                v: field(r, 2)?,
                omega: field(r, 3)?,
                v_cmd: field(r, 4)?,
                omega_cmd: field(r, 5)?,
                g_v: field(r, 6)?,
                g_omega: field(r, 7)?,
            })
        })
        .collect()
}

pub fn format_track(rows: &[TrackRow]) -> String {
    write_csv(
        TRACK_HEADER,
        &TRACK_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.vertex_id.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.theta.to_string(),
                r.s.to_string(),
                r.lateral_error.to_string(),
                r.accepted_runs.to_string(),
                r.max_slack.to_string(),
            ]
        }),
    )
}

pub fn parse_track(text: &str) -> Result<Vec<TrackRow>, String> {
    csv_rows(body(text, TRACK_HEADER)?, &TRACK_COLUMNS)?
        .iter()
        .map(|r| {
            Ok(TrackRow {
                step: field(r, 0)?,
                vertex_id: field(r, 1)?,
                x: field(r, 2)?,
                y: field(r, 3)?,
                theta: field(r, 4)?,
                s: field(r, 5)?,
                lateral_error: field(r, 6)?,
                accepted_runs: field(r, 7)?,
                max_slack: field(r, 8)?,
            })
        })
        .collect()
}

fn model_columns() -> Vec<String> {
    let mut c = vec!["step".to_string()];
    for ch in ["speed", "turn"] {
        for f in ["w0", "w1", "v00", "v01", "v10", "v11", "a", "b"] {
            c.push(format!("{ch}_{f}"));
        }
    }
    c
}

pub fn format_models(models: &[ChannelModels]) -> String {
    let cols = model_columns();
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    write_csv(
        MODELS_HEADER,
        &cols,
        models.iter().enumerate().map(|(k, m)| {
            let mut row = vec![k.to_string()];
            row.extend(m.speed.to_flat().iter().chain(m.turn.to_flat().iter()).map(f64::to_string));
            row
        }),
    )
}

fn posterior_from_fields(v: &[f64]) -> Result<NigPosterior, String> {
    NigPosterior::new(
        DVector::from_column_slice(&v[0..2]),
        DMatrix::from_row_slice(2, 2, &v[2..6]),
        v[6],
        v[7],
    )
    .map_err(|e| e.to_string())
}

pub fn parse_models(text: &str) -> Result<Vec<ChannelModels>, String> {
    let cols = model_columns();
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    csv_rows(body(text, MODELS_HEADER)?, &cols)?
        .iter()
        .map(|r| {
            let vals: Vec<f64> = (1..17).map(|i| field(r, i)).collect::<Result<_, _>>()?;
            Ok(PerChannel::new(
                posterior_from_fields(&vals[0..8])?,
                posterior_from_fields(&vals[8..16])?,
            ))
        })
        .collect()
}

pub fn format_metrics(table: &MetricTable) -> String {
    write_csv(METRICS_HEADER, &MetricTable::HEADER, table.to_records())
}

pub fn format_percentiles(p: &[Option<[f64; 3]>]) -> String {
    write_csv(
        PERCENTILES_HEADER,
        &["vertex_id", "p25", "p50", "p75"],
        p.iter().enumerate().filter_map(|(v, q)| {
            q.map(|q| vec![v.to_string(), q[0].to_string(), q[1].to_string(), q[2].to_string()])
        }),
    )
}

pub fn format_summary(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(&report.summary).expect("summary serialises");
    s.push('\n');
    s
}

/// Directory for a scenario's runs under an output root.
pub fn run_dir(out_root: &FsPath, scenario: &str) -> PathBuf {
    out_root.join("runs").join(scenario)
}

fn write(path: &FsPath, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Write all run files and the report. Returns the run directory.
pub fn write_run_dir(
    out_root: &FsPath,
    manifest: &Manifest,
    runs: &[RunData],
    report: &Report,
) -> Result<PathBuf, IoError> {
    let dir = run_dir(out_root, &manifest.scenario);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut m = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    m.push('\n');
    write(&dir.join("manifest.json"), &m)?;
    for r in runs {
        write(&dir.join(format!("{}.csv", r.run_id)), &format_run_log(&r.log))?;
        write(&dir.join(format!("{}.track.csv", r.run_id)), &format_track(&r.track))?;
        write(&dir.join(format!("{}.models.csv", r.run_id)), &format_models(&r.models))?;
    }
    write(&dir.join("metrics.csv"), &format_metrics(&report.table))?;
    write(&dir.join("lateral_percentiles.csv"), &format_percentiles(&report.percentiles))?;
    write(&dir.join("summary.json"), &format_summary(report))?;
    Ok(dir)
}

fn read(path: &FsPath) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Load a run directory written by [`write_run_dir`].
pub fn read_run_dir(dir: &FsPath) -> Result<(Manifest, Vec<RunData>), IoError> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read(&mpath)?).map_err(|e| fmt_err(&mpath, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(fmt_err(&mpath, format!("unsupported format {:?}", manifest.format)));
    }
    let mut runs = Vec::with_capacity(manifest.runs.len());
    for mr in &manifest.runs {
        let p = dir.join(format!("{}.csv", mr.run_id));
        let log = parse_run_log(&read(&p)?).map_err(|e| fmt_err(&p, e))?;
        let p = dir.join(format!("{}.track.csv", mr.run_id));
        let track = parse_track(&read(&p)?).map_err(|e| fmt_err(&p, e))?;
        let p = dir.join(format!("{}.models.csv", mr.run_id));
        let models = parse_models(&read(&p)?).map_err(|e| fmt_err(&p, e))?;
        if log.len() != track.len() || log.len() != models.len() {
            return Err(fmt_err(dir, format!("run {} files have different row counts", mr.run_id)));
        }
        runs.push(RunData {
            run_id: mr.run_id,
            condition: mr.condition.clone(),
            log,
            track,
            models,
        });
    }
    Ok((manifest, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trip() {
        let pts = vec![[0.0, 0.1], [1.0 / 3.0, -2.5e-7]];
        assert_eq!(parse_path_file(&format_path_file(&pts)).unwrap(), pts);
    }

    #[test]
    fn malformed_path_files() {
        assert!(parse_path_file("x,y\n0,0\n1,1\n").is_err());
        assert!(parse_path_file("# wblr-path v1\nx,y\n0,0\n").is_err());
        assert!(parse_path_file("# wblr-path v1\nx,y\n0,0\n1,abc\n").is_err());
        assert!(parse_path_file("# wblr-path v1\nx,y\n0,0\n1\n").is_err());
        assert!(parse_path_file("# wblr-path v1\nx,y\n0,0\n1,NaN\n").is_err());
        assert!(parse_path_file("").is_err());
    }

    #[test]
    fn run_log_round_trip() {
        let rows = vec![LogRow {
            vertex_id: 3,
            timestamp: 0.30000000000000004,
            v: 2.0,
            omega: -0.1,
            v_cmd: 2.000000001,
            omega_cmd: 1e-300,
            g_v: -0.0,
            g_omega: 12345.678,
        }];
        let text = format_run_log(&rows);
        assert!(text.starts_with("# wblr-run-log v1\nvertex_id,timestamp,v,omega,v_cmd,omega_cmd,g_v,g_omega\n"));
        assert_eq!(parse_run_log(&text).unwrap(), rows);
    }

    #[test]
    fn models_round_trip() {
        let p = NigPosterior::first_order_lag(0.37, 0.9, 2.5, 0.1).unwrap();
        let m = vec![PerChannel::new(p.clone(), p)];
        assert_eq!(parse_models(&format_models(&m)).unwrap(), m);
    }
}
