//! Experiment driver: calibration, the prediction-error sweep, pWCET fits,
//! full-cluster simulation and chart rendering.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod svg;

use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hrms_core::engine::rng_stream;
use hrms_core::pwcet::{FitReport, PwcetError, SampleSet, DEFAULT_EXCEEDANCE};
use hrms_core::reliability::{
    calibrate_failure_rate, run_scenario, CheckpointPolicy, FaultModel, ReliabilityError, Scenario,
    CALIBRATION_TARGET, CALIBRATION_TOLERANCE,
};
use hrms_core::rtms::{simulate, write_decision_log, write_job_metrics, DispatchParams, RtmsError, SimulationConfig};
use hrms_core::workload::generate_workload;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use config::{Loaded, Overrides};
use svg::{Point, Series};

pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const CALIBRATION_HEADER: &str = "rate,median_overhead,evaluations,replicas,seed";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "policy,epsilon,median_overhead,iqr,deadline_miss_fraction,replicas";
pub const SWEEP_REPLICAS_FILE: &str = "sweep_replicas.csv";
pub const SWEEP_REPLICAS_HEADER: &str = "policy,epsilon,replica,overhead,deadline_miss_fraction,aborted";
pub const SWEEP_CHART: &str = "sweep.svg";
pub const PWCET_FILE: &str = "pwcet.csv";
pub const PWCET_CHART: &str = "pwcet.svg";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("no failure rate: set failure_rate in the config or run `calibrate` first ({0} not found)")]
    MissingCalibration(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error(transparent)]
    Rtms(#[from] RtmsError),
    #[error(transparent)]
    Pwcet(#[from] PwcetError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Calibration(_) | CliError::MissingCalibration(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "hrms", version, about = "Heterogeneous cluster resource-management simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
    /// Comma-separated prediction errors, e.g. 0,0.01,0.05
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    pub epsilon_grid: Option<Vec<f64>>,
    /// Exceedance probability for pWCET estimates
    #[arg(long, global = true)]
    pub exceedance: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the cluster with the configured policy and workload
    Simulate,
    /// Find the restart-only failure rate giving a median slowdown of 1
    Calibrate,
    /// Overhead of every policy over the prediction-error grid
    Sweep,
    /// Fit pWCET models to execution-time sample files (one value per line)
    Pwcet {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
    },
    /// Redraw charts from the CSV files in the output directory
    Report,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            replicas: self.replicas,
            epsilon_grid: self.epsilon_grid.clone(),
        }
    }

    fn load(&self) -> Result<Loaded, CliError> {
        config::load(self.config.as_deref(), &self.overrides())
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let out = match &self.out {
            Some(o) => o.clone(),
            None => self.load()?.config.out,
        };
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(out)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Calibrate => {
            let loaded = cli.load()?;
            let out = prepare_out(&loaded)?;
            let cal = cmd_calibrate(&loaded)?;
            write_file(&out.join(CALIBRATION_FILE), &cal.to_csv())?;
            println!(
                "rate {} /s, median O {} after {} evaluations",
                cal.rate, cal.median_overhead, cal.evaluations
            );
        }
        Command::Sweep => {
            let loaded = cli.load()?;
            let out = prepare_out(&loaded)?;
            let sweep = cmd_sweep(&loaded)?;
            sweep.write(&out)?;
            println!("{} cells written to {}", sweep.rows.len(), out.join(SWEEP_FILE).display());
        }
        Command::Pwcet { samples } => {
            let p_e = cli.exceedance.unwrap_or(DEFAULT_EXCEEDANCE);
            if !(p_e > 0.0 && p_e < 1.0) {
                return Err(CliError::Config(vec![format!("exceedance: {p_e} is outside (0, 1)")]));
            }
            let out = cli.out_dir()?;
            let csv = cmd_pwcet(samples, p_e)?;
            write_file(&out.join(PWCET_FILE), &csv)?;
            write_file(&out.join(PWCET_CHART), &pwcet_chart(&csv)?)?;
            print!("{csv}");
        }
        Command::Simulate => {
            let loaded = cli.load()?;
            let out = prepare_out(&loaded)?;
            let summary = cmd_simulate(&loaded, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Report => {
            let out = cli.out_dir()?;
            let written = cmd_report(&out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn prepare_out(loaded: &Loaded) -> Result<PathBuf, CliError> {
    let out = loaded.config.out.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    Ok(out)
}

fn scenario(loaded: &Loaded, policy: CheckpointPolicy, epsilon: f64, rate: f64) -> Scenario {
    let c = &loaded.config;
    Scenario {
        workload: c.workload.clone(),
        costs: c.costs,
        policy,
        epsilon,
        failure_rate: rate,
        replicas: c.replicas,
        seed: c.seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub rate: f64,
    pub median_overhead: f64,
    pub evaluations: usize,
    pub replicas: usize,
    pub seed: u64,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{CALIBRATION_HEADER}\n{},{},{},{},{}\n",
            self.rate, self.median_overhead, self.evaluations, self.replicas, self.seed
        )
    }
}

pub fn cmd_calibrate(loaded: &Loaded) -> Result<CalibrationReport, CliError> {
    let s = scenario(loaded, CheckpointPolicy::RestartOnly, 0.0, 0.0);
    let cal = match calibrate_failure_rate(&s) {
        Ok(c) => c,
        Err(e @ ReliabilityError::NoBracket { .. }) => return Err(CliError::Calibration(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if (cal.median_overhead - CALIBRATION_TARGET).abs() > CALIBRATION_TOLERANCE {
        return Err(CliError::Calibration(format!(
            "best rate {} gives median O {}, outside {} +- {}",
            cal.rate, cal.median_overhead, CALIBRATION_TARGET, CALIBRATION_TOLERANCE
        )));
    }
    Ok(CalibrationReport {
        rate: cal.rate,
        median_overhead: cal.median_overhead,
        evaluations: cal.evaluations,
        replicas: loaded.config.replicas,
        seed: loaded.config.seed,
    })
}

/// Rate from `calibration.csv`.
pub fn read_calibration(path: &Path) -> Result<f64, CliError> {
    if !path.exists() {
        return Err(CliError::MissingCalibration(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let bad = |m: String| CliError::Calibration(format!("{}: {m}", path.display()));
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "rate")
        .ok_or_else(|| bad("no rate column".into()))?;
    let row = reader
        .records()
        .next()
        .ok_or_else(|| bad("no data row".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let rate: f64 = row
        .get(col)
        .unwrap_or_default()
        .parse()
        .map_err(|e| bad(format!("rate: {e}")))?;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(bad(format!("rate {rate} must be positive")));
    }
    Ok(rate)
}

fn failure_rate(loaded: &Loaded) -> Result<f64, CliError> {
    match loaded.config.failure_rate {
        Some(r) => Ok(r),
        None => read_calibration(&loaded.config.out.join(CALIBRATION_FILE)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: String,
    pub epsilon: f64,
    pub median_overhead: f64,
    pub iqr: f64,
    pub deadline_miss_fraction: f64,
    pub replicas: usize,
    /// Per-replica overhead, deadline-miss fraction and aborted count.
    pub per_replica: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rate: f64,
    /// Policy-major, epsilon ascending.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn cell(&self, policy: &str, epsilon: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.policy == policy && r.epsilon == epsilon)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.policy, r.epsilon, r.median_overhead, r.iqr, r.deadline_miss_fraction, r.replicas
            ));
        }
        s
    }

    pub fn replicas_csv(&self) -> String {
        let mut s = format!("{SWEEP_REPLICAS_HEADER}\n");
        for r in &self.rows {
            for (i, (o, miss, aborted)) in r.per_replica.iter().enumerate() {
                s.push_str(&format!("{},{},{i},{o},{miss},{aborted}\n", r.policy, r.epsilon));
            }
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let csv = self.to_csv();
        write_file(&out.join(SWEEP_FILE), &csv)?;
        write_file(&out.join(SWEEP_REPLICAS_FILE), &self.replicas_csv())?;
        write_file(&out.join(SWEEP_CHART), &sweep_chart(&csv)?)
    }
}

/// Every (policy, epsilon) cell over the same replica seeds. Cells run in
/// parallel and are merged in grid order.
pub fn cmd_sweep(loaded: &Loaded) -> Result<SweepResult, CliError> {
    let rate = failure_rate(loaded)?;
    let cells: Vec<(CheckpointPolicy, f64)> = loaded
        .policies
        .iter()
        .flat_map(|&p| loaded.config.epsilon_grid.iter().map(move |&e| (p, e)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(policy, epsilon)| {
            let result = run_scenario(&scenario(loaded, policy, epsilon, rate))?;
            Ok(SweepRow {
                policy: policy.name().to_string(),
                epsilon,
                median_overhead: result.median_overhead,
                iqr: result.iqr,
                deadline_miss_fraction: result.deadline_miss_fraction(),
                replicas: result.replicas.len(),
                per_replica: result
                    .replicas
                    .iter()
                    .map(|r| (r.overhead, r.deadline_miss_fraction, r.aborted))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, ReliabilityError>>()?;
    Ok(SweepResult { rate, rows })
}

fn csv_table(text: &str, file: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |e: csv::Error| CliError::Input(format!("{file}: {e}"));
    let headers = reader.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(bad))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((headers, rows))
}

fn column(headers: &[String], name: &str, file: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Input(format!("{file}: missing column {name}")))
}

/// Overhead against prediction error, one line per policy.
pub fn sweep_chart(csv: &str) -> Result<String, CliError> {
    let (headers, rows) = csv_table(csv, SWEEP_FILE)?;
    let (p, e, o) = (
        column(&headers, "policy", SWEEP_FILE)?,
        column(&headers, "epsilon", SWEEP_FILE)?,
        column(&headers, "median_overhead", SWEEP_FILE)?,
    );
    let mut series: Vec<Series> = Vec::new();
    for row in &rows {
        let point = Point {
            x: row[e].clone(),
            y: row[o].clone(),
        };
        match series.iter_mut().find(|s| s.name == row[p]) {
            Some(s) => s.points.push(point),
            None => series.push(Series {
                name: row[p].clone(),
                points: vec![point],
            }),
        }
    }
    Ok(svg::line_chart(
        "Overhead vs MTTF prediction error",
        "MTTF prediction error",
        "(T_exe - T_ideal) / T_ideal",
        &series,
    ))
}

/// Label of a sample file: its stem, with commas replaced so it stays one
/// CSV field.
pub fn sample_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().replace([',', '\n', '"'], "_"))
        .unwrap_or_else(|| "samples".into())
}

/// Fit report CSV for the given sample files, in argument order.
pub fn cmd_pwcet(files: &[PathBuf], p_e: f64) -> Result<String, CliError> {
    let mut csv = FitReport::csv_header(p_e);
    csv.push('\n');
    for path in files {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let set = SampleSet::read(sample_label(path), BufReader::new(file))
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let report =
            FitReport::from_samples(&set, p_e).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    Ok(csv)
}

/// MET next to pWCET for every label.
pub fn pwcet_chart(csv: &str) -> Result<String, CliError> {
    let (headers, rows) = csv_table(csv, PWCET_FILE)?;
    let label = column(&headers, "label", PWCET_FILE)?;
    let met = column(&headers, "met", PWCET_FILE)?;
    let pw = headers
        .iter()
        .position(|h| h.starts_with("pwcet_"))
        .ok_or_else(|| CliError::Input(format!("{PWCET_FILE}: missing pwcet column")))?;
    let pw_name = headers[pw].replacen("pwcet_", "pWCET ", 1);
    let categories: Vec<String> = rows.iter().map(|r| r[label].clone()).collect();
    let series = |name: &str, col: usize| Series {
        name: name.to_string(),
        points: rows
            .iter()
            .map(|r| Point {
                x: r[label].clone(),
                y: r[col].clone(),
            })
            .collect(),
    };
    Ok(svg::bar_chart(
        "MET and pWCET per configuration",
        "execution time",
        &categories,
        &[series("MET", met), series(&pw_name, pw)],
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub policy: String,
    pub epsilon: f64,
    pub seed: u64,
    /// Base transient failure rate, 1/s, or none without calibration.
    pub base_failure_rate: Option<f64>,
    #[serde(flatten)]
    pub summary: hrms_core::rtms::Summary,
}

pub const JOBS_FILE: &str = "jobs.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Generates the workload, runs the cluster and writes `jobs.csv`,
/// `schedule.csv` and `summary.json`. Transient faults are enabled when a
/// failure rate is configured or calibrated.
pub fn cmd_simulate(loaded: &Loaded, out: &Path) -> Result<SimulateSummary, CliError> {
    let c = &loaded.config;
    let s = &c.simulate;
    let rate = match failure_rate(loaded) {
        Ok(r) => Some(r),
        Err(CliError::MissingCalibration(_)) => None,
        Err(e) => return Err(e),
    };
    let fault_model = rate
        .map(|r| FaultModel::from_rate(
                r,
                c.fault_model.t_ref.unwrap_or(s.thermal.ambient_k),
                c.fault_model.beta,
            ))
        .transpose()?;
    let trace = generate_workload(&mut rng_stream(c.seed, "workload", &[0]), &c.workload)
        .map_err(RtmsError::from)?;
    let cfg = SimulationConfig {
        epsilon: s.epsilon,
        costs: c.costs,
        fault_model,
        thermal: s.thermal,
        thermal_step: s.thermal_step,
        node_down: s.node_down.clone(),
        device_faults: s.device_faults.clone(),
        dispatch: DispatchParams {
            hop_latency: s.hop_latency,
            power_weight: s.power_weight,
            ..DispatchParams::default()
        },
        pwcet_runs: s.pwcet_runs,
        horizon: s.horizon,
        seed: c.seed,
        ..SimulationConfig::new(loaded.topology.clone(), loaded.sim_policy)
    };
    let result = simulate(&cfg, &trace.jobs)?;

    let mut jobs = Vec::new();
    write_job_metrics(&result.jobs, &loaded.sim_policy, s.epsilon, &mut jobs).expect("writing to memory");
    let mut log = Vec::new();
    write_decision_log(&result.log, &mut log).expect("writing to memory");
    write_file(&out.join(JOBS_FILE), &String::from_utf8_lossy(&jobs))?;
    write_file(&out.join(SCHEDULE_FILE), &String::from_utf8_lossy(&log))?;
    let summary = SimulateSummary {
        policy: loaded.sim_policy.name().to_string(),
        epsilon: s.epsilon,
        seed: c.seed,
        base_failure_rate: rate,
        summary: result.summary,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join(SUMMARY_FILE), &(json + "\n"))?;
    Ok(summary)
}

/// Rewrites `sweep.svg` and `pwcet.svg` from whichever CSVs exist.
pub fn cmd_report(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let sweep = out.join(SWEEP_FILE);
    if sweep.exists() {
        let path = out.join(SWEEP_CHART);
        write_file(&path, &sweep_chart(&read_file(&sweep)?)?)?;
        written.push(path);
    }
    let pw = out.join(PWCET_FILE);
    if pw.exists() {
        let path = out.join(PWCET_CHART);
        write_file(&path, &pwcet_chart(&read_file(&pw)?)?)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(CliError::Input(format!(
            "{}: neither {SWEEP_FILE} nor {PWCET_FILE} found",
            out.display()
        )));
    }
    Ok(written)
}
