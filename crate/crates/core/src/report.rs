//! Run artifacts and the reports derived from them.
//!
//! A suite writes one timestamped directory:
//!
//! ```text
//! <output_dir>/<name>-<YYYYmmdd-HHMMSS>/
//!     suite.json
//!     runs/<label>/summary.json
//!     runs/<label>/latency.csv
//!     runs/<label>/throughput.csv
//! ```
//!
//! `report` reads only those files and writes `report/` next to them, so
//! reporting the same directory twice gives byte-identical output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{Query, SutReport};
use crate::driver::{MstResult, RunOutcome, SuiteOutcome, Verdict};
use crate::generator::GenerationReport;
use crate::metrics::MetricsSummary;
use crate::model::WindowSpec;
use crate::pacing::RateSchedule;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing artifacts: {}", .0.display())]
    MissingArtifacts(PathBuf),
    #[error("malformed artifact {}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    /// Directory under `runs/`.
    pub dir: String,
    pub mean_rate: f64,
    pub schedule: RateSchedule,
    pub valid: bool,
    pub verdict: Verdict,
    pub generation: GenerationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sut: Option<SutReport>,
    pub outputs_recorded: u64,
    pub anomalies: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_latency: Option<MetricsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proc_latency: Option<MetricsSummary>,
}

impl RunRecord {
    pub fn from_outcome(outcome: &RunOutcome) -> Self {
        RunRecord {
            label: outcome.label.clone(),
            dir: dir_name(&outcome.label),
            mean_rate: outcome.mean_rate(),
            schedule: outcome.schedule.clone(),
            valid: outcome.valid,
            verdict: outcome.verdict.clone(),
            generation: outcome.generation.clone(),
            sut: outcome.sut.clone(),
            outputs_recorded: outcome.latency.recorded(),
            anomalies: outcome.latency.anomalies(),
            event_latency: outcome.event_latency,
            proc_latency: outcome.proc_latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub query: Query,
    pub window: WindowSpec,
    pub started_at: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mst: Option<MstResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew_mst: Option<MstResult>,
    pub runs: Vec<RunRecord>,
}

impl SuiteReport {
    pub fn new(name: &str, query: Query, window: WindowSpec, started_at: String, suite: &SuiteOutcome) -> Self {
        SuiteReport {
            name: name.to_string(),
            query,
            window,
            started_at,
            valid: suite.valid(),
            halted: suite.halted.clone(),
            mst: suite.mst.clone(),
            skew_mst: suite.skew_mst.clone(),
            runs: suite.runs.iter().map(RunRecord::from_outcome).collect(),
        }
    }
}

/// File-system safe form of a run label: `reference(90%)` -> `reference_90pct_`.
pub fn dir_name(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '.' => out.push(c),
            '%' => out.push_str("pct"),
            _ => out.push('_'),
        }
    }
    if out.is_empty() {
        out.push_str("run");
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes a new timestamped artifact directory under `output_dir`.
pub fn write_artifacts(output_dir: &Path, report: &SuiteReport, runs: &[RunOutcome]) -> Result<PathBuf, ReportError> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = output_dir.join(format!("{}-{stamp}", dir_name(&report.name)));
    let mut root = base.clone();
    let mut n = 1;
    while root.exists() {
        root = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    let runs_dir = root.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
    let json = serde_json::to_string_pretty(report).expect("suite report serializes");
    write(&root.join("suite.json"), &json)?;
    for (record, outcome) in report.runs.iter().zip(runs) {
        let dir = runs_dir.join(&record.dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write(&dir.join("summary.json"), &serde_json::to_string_pretty(record).expect("run record serializes"))?;
        write(&dir.join("latency.csv"), &outcome.latency.time_series().to_csv())?;
        write(&dir.join("throughput.csv"), &outcome.telemetry.to_csv())?;
    }
    Ok(root)
}

fn read(path: &Path) -> Result<String, ReportError> {
    if !path.is_file() {
        return Err(ReportError::MissingArtifacts(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn load_suite(run_dir: &Path) -> Result<SuiteReport, ReportError> {
    let path = run_dir.join("suite.json");
    let text = read(&path)?;
    serde_json::from_str(&text).map_err(|e| ReportError::Malformed { path, message: e.to_string() })
}

fn secs(nanos: u64) -> f64 {
    nanos as f64 / 1e9
}

/// Latency statistics table in seconds, one row per run.
pub fn latency_table(suite: &SuiteReport, event_time: bool) -> String {
    let width = suite.runs.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}\n",
        "run", "avg", "min", "max", "q90", "q95", "q99"
    );
    for run in &suite.runs {
        let summary = if event_time { run.event_latency } else { run.proc_latency };
        match summary {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>10.3}  {:>10.3}  {:>10.3}  {:>10.3}  {:>10.3}  {:>10.3}",
                    run.label,
                    secs(s.avg),
                    secs(s.min),
                    secs(s.max),
                    secs(s.q90),
                    secs(s.q95),
                    secs(s.q99)
                );
            }
            None => {
                let _ = writeln!(out, "{:<width$}  {:>10}", run.label, "-");
            }
        }
    }
    out
}

fn malformed(path: &Path, message: impl Into<String>) -> ReportError {
    ReportError::Malformed { path: path.to_path_buf(), message: message.into() }
}

/// Splits `latency.csv` into one gnuplot data file per metric.
fn latency_dat(path: &Path, text: &str) -> Result<[String; 2], ReportError> {
    let header = "# second p50 p90 p95 p99 avg min max (seconds)\n";
    let mut event = format!("# event-time latency\n{header}");
    let mut proc = format!("# processing-time latency\n{header}");
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(malformed(path, format!("expected 9 columns: {line}")));
        }
        let target = match cols[1] {
            "event" => &mut event,
            "proc" => &mut proc,
            other => return Err(malformed(path, format!("unknown metric {other}"))),
        };
        let mut row = cols[0].to_string();
        for c in &cols[2..] {
            row.push(' ');
            row.push_str(c);
        }
        target.push_str(&row);
        target.push('\n');
    }
    Ok([event, proc])
}

fn throughput_dat(path: &Path, text: &str) -> Result<String, ReportError> {
    let mut out = String::from("# second depth offered_per_s taken_per_s\n");
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(malformed(path, format!("expected 4 columns: {line}")));
        }
        out.push_str(&cols.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Writes summary tables and gnuplot data into `<run_dir>/report/` and
/// returns the tables as printed text.
pub fn generate(run_dir: &Path) -> Result<String, ReportError> {
    let suite = load_suite(run_dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    for run in &suite.runs {
        let dir = run_dir.join("runs").join(&run.dir);
        read(&dir.join("summary.json"))?;
        let lat_path = dir.join("latency.csv");
        let [event, proc] = latency_dat(&lat_path, &read(&lat_path)?)?;
        let tp_path = dir.join("throughput.csv");
        let throughput = throughput_dat(&tp_path, &read(&tp_path)?)?;
        files.push((format!("{}.event_latency.dat", run.dir), event));
        files.push((format!("{}.proc_latency.dat", run.dir), proc));
        files.push((format!("{}.throughput.dat", run.dir), throughput));
    }

    let mut text = format!("suite {} ({}, {})\n", suite.name, suite.query, if suite.valid { "valid" } else { "INVALID" });
    if let Some(reason) = &suite.halted {
        let _ = writeln!(text, "halted: {reason}");
    }
    if let Some(mst) = &suite.mst {
        let _ = writeln!(text, "sustainable throughput: {:.0} events/s ({} probes)", mst.mst, mst.probes.len());
    }
    if let Some(mst) = &suite.skew_mst {
        let _ = writeln!(text, "sustainable throughput, skewed keys: {:.0} events/s", mst.mst);
    }
    let _ = write!(text, "\nevent-time latency (s)\n{}", latency_table(&suite, true));
    let _ = write!(text, "\nprocessing-time latency (s)\n{}", latency_table(&suite, false));

    let out = run_dir.join("report");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write(&out.join("summary.txt"), &text)?;
    for (name, contents) in files {
        write(&out.join(name), &contents)?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_become_safe_directory_names() {
        assert_eq!(dir_name("reference(90%)"), "reference_90pct_");
        assert_eq!(dir_name("a/b c"), "a_b_c");
        assert_eq!(dir_name(""), "run");
    }

    #[test]
    fn empty_directory_is_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(dir.path()), Err(ReportError::MissingArtifacts(_))));
    }

    #[test]
    fn latency_csv_splits_by_metric() {
        let csv = "second,metric,p50,p90,p95,p99,avg,min,max\n0,event,1,2,3,4,5,6,7\n0,proc,1,1,1,1,1,1,1\n";
        let [e, p] = latency_dat(Path::new("x"), csv).unwrap();
        assert!(e.ends_with("0 1 2 3 4 5 6 7\n"));
        assert!(p.ends_with("0 1 1 1 1 1 1 1\n"));
        assert!(latency_dat(Path::new("x"), "h\n0,other,1,2,3,4,5,6,7\n").is_err());
    }
}
