//! `wblr-mpc`: run scenarios, recompute metrics, compare learning
//! configurations and time the controller.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use wblr_mpc::ablation::{format_rows, run_ablation};
use wblr_mpc::io::{format_metrics, read_run_dir, write_run_dir};
use wblr_mpc::metrics::{median, percentile};
use wblr_mpc::report::{build_report, Manifest, RunData};
use wblr_mpc::sim::{Scenario, Simulator};

/// Environment variable naming the default output root.
const OUT_DIR_ENV: &str = "WBLR_OUT_DIR";

#[derive(Parser)]
#[command(name = "wblr-mpc", version, about = "Learning tube MPC for repetitive path following")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write run logs and metrics.
    Simulate {
        /// Scenario file, or the name of a shipped scenario.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; defaults to $WBLR_OUT_DIR, then ./wblr-out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Recompute the metric table of a run directory and print it.
    Metrics {
        run_dir: PathBuf,
        /// Also rewrite metrics.csv, lateral_percentiles.csv and summary.json.
        #[arg(long)]
        write: bool,
    },
    /// Compare no learning, long-term only, fast only and both.
    Ablation {
        scenario: String,
        /// Comma-separated seeds; defaults to the scenario seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Time control steps (model building plus SQP solve).
    Bench {
        /// Scenario file or name.
        #[arg(long, default_value = "circle_disturbance")]
        scenario: String,
        #[arg(long, default_value_t = 2)]
        runs: usize,
    },
}

fn resolve_scenario(arg: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(arg);
    if p.is_file() {
        return Ok(p);
    }
    let dir = Path::new(wblr_mpc::DATA_DIR).join("scenarios");
    for cand in [dir.join(arg), dir.join(format!("{arg}.scn"))] {
        if cand.is_file() {
            return Ok(cand);
        }
    }
    Err(format!("scenario {arg:?} not found (looked for a file and in {})", dir.display()))
}

fn load_scenario(arg: &str, seed: Option<u64>, runs: Option<usize>) -> Result<Scenario, String> {
    let path = resolve_scenario(arg)?;
    let mut sc = Scenario::from_file(&path).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(n) = runs {
        if n == 0 {
            return Err("--runs must be at least 1".into());
        }
        let last = sc.conditions.last().cloned().expect("validated scenario has runs");
        sc.conditions.resize(n, last);
    }
    Ok(sc)
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("wblr-out"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.4}"))
}

fn simulate(scenario: &str, seed: Option<u64>, out: Option<PathBuf>, runs: Option<usize>) -> Result<(), String> {
    let sc = load_scenario(scenario, seed, runs)?;
    let mut sim = Simulator::new(&sc).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    while let Some(r) = sim.run_next().map_err(|e| e.to_string())? {
        eprintln!(
            "run {} ({}): {} steps{}",
            r.run_id,
            r.condition,
            r.log.len(),
            r.aborted.as_ref().map_or(String::new(), |a| format!(", aborted: {a}"))
        );
        outputs.push(r);
    }
    let manifest = Manifest::new(&sc, &outputs);
    let data: Vec<RunData> = outputs.iter().map(RunData::from).collect();
    let report = build_report(&manifest, &data).map_err(|e| e.to_string())?;
    let dir = write_run_dir(&out_root(out), &manifest, &data, &report).map_err(|e| e.to_string())?;
    println!("scenario {} seed {} -> {}", sc.name, sc.seed, dir.display());
    println!("run  condition            lateral_rms  lateral_max  post_dist_med  m_rmsz_med");
    for r in &report.summary.runs {
        println!(
            "{:<4} {:<20} {:>11} {:>12.4} {:>14} {:>11}",
            r.run_id,
            r.condition,
            fmt_opt(r.lateral_rms),
            r.lateral_max,
            fmt_opt(r.post_disturbance_median),
            fmt_opt(r.m_rmsz_median)
        );
    }
    Ok(())
}

fn metrics(dir: &Path, write: bool) -> Result<(), String> {
    let (manifest, runs) = read_run_dir(dir).map_err(|e| e.to_string())?;
    let report = build_report(&manifest, &runs).map_err(|e| e.to_string())?;
    if write {
        let root = dir
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| format!("{} is not inside a runs/ directory", dir.display()))?;
        write_run_dir(root, &manifest, &runs, &report).map_err(|e| e.to_string())?;
    }
    print!("{}", format_metrics(&report.table));
    Ok(())
}

fn ablation(scenario: &str, seeds: Vec<u64>, out: Option<PathBuf>, runs: Option<usize>) -> Result<(), String> {
    let sc = load_scenario(scenario, None, runs)?;
    let seeds = if seeds.is_empty() { vec![sc.seed] } else { seeds };
    let started = Instant::now();
    let res = run_ablation(&sc, &seeds, |flags, seed| {
        eprintln!("{} seed {seed} done ({:.1} s)", flags.label(), started.elapsed().as_secs_f64());
    })
    .map_err(|e| e.to_string())?;
    let rows = res.rows(sc.controller.mpc.chance.e_c_max);
    let table = format_rows(&rows);
    let dir = out_root(out).join("ablation").join(&sc.name);
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let file = dir.join("ablation.csv");
    std::fs::write(&file, &table).map_err(|e| format!("{}: {e}", file.display()))?;
    print!("{table}");
    eprintln!("written to {}", file.display());
    Ok(())
}

fn bench(scenario: &str, runs: usize) -> Result<(), String> {
    let sc = load_scenario(scenario, None, Some(runs.max(1)))?;
    let mut sim = Simulator::new(&sc).map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    let mut kkt: f64 = 0.0;
    while let Some(r) = sim.run_next().map_err(|e| e.to_string())? {
        times.extend_from_slice(&r.step_seconds);
        kkt = kkt.max(r.max_kkt_residual);
    }
    if times.is_empty() {
        return Err("no control steps were executed".into());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    println!("control steps: {}", times.len());
    println!("mean step time: {:.3} ms", 1e3 * mean);
    println!("median step time: {:.3} ms", 1e3 * median(&times));
    println!("95th percentile: {:.3} ms", 1e3 * percentile(&times, 0.95));
    println!("max KKT residual: {kkt:e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
            runs,
        } => simulate(&scenario, seed, out, runs),
        Command::Metrics { run_dir, write } => metrics(&run_dir, write),
        Command::Ablation {
            scenario,
            seeds,
            out,
            runs,
        } => ablation(&scenario, seeds, out, runs),
        Command::Bench { scenario, runs } => bench(&scenario, runs),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
