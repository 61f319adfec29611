//! Sweep execution: start a backend per setup, collect its metric lines,
//! persist one run record per setup.

mod backend;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{Backend, BackendError, Capabilities, ReplayBackend, SerialBackend, Session, SimBackend};

use crate::genspace::{Manifest, Setup};
use crate::logmon::{Leftover, LineError, collect, collect_lines};
use crate::metrics::{Metric, MetricsSample};

pub const SUMMARY_FILE: &str = "sweep_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Timeout,
    ParseError,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Complete => "complete",
            RunStatus::Timeout => "timeout",
            RunStatus::ParseError => "parse_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setup_id: u32,
    pub setup_name: String,
    pub backend: String,
    pub run_id: String,
    /// Wall clock, milliseconds since the Unix epoch.
    pub started_at_ms: u64,
    pub ended_at_ms: u64,
    pub repetitions: u32,
    pub status: RunStatus,
    pub samples: Vec<MetricsSample>,
    /// Raw log path per VM, relative to the results directory.
    pub raw_logs: BTreeMap<String, String>,
    #[serde(default)]
    pub errors: Vec<LineError>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub leftovers: Vec<Leftover>,
    /// Expected `vm/bench` streams that never ended.
    #[serde(default)]
    pub unterminated: Vec<String>,
}

impl RunRecord {
    /// Fields that must agree between two executions of the same setup;
    /// timestamps and backend are excluded.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.setup_id == other.setup_id
            && self.setup_name == other.setup_name
            && self.run_id == other.run_id
            && self.status == other.status
            && self.samples == other.samples
            && self.errors == other.errors
            && self.leftovers == other.leftovers
            && self.unterminated == other.unterminated
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("setup {setup_id} (`{setup_name}`): backend failed to start: {source}")]
    Start {
        setup_id: u32,
        setup_name: String,
        #[source]
        source: BackendError,
    },
    #[error("backend is not parallelizable")]
    NotParallelizable,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn run_id_for(setup: &Setup) -> String {
    format!("r{}", setup.id)
}

pub fn record_file_name(setup_id: u32) -> String {
    format!("run_{setup_id}.json")
}

pub fn raw_log_path(setup_name: &str, vm: &str) -> String {
    format!("raw/{setup_name}/{vm}.log")
}

/// Streams whose samples fall short of `repetitions`: `time_ms`, and any
/// other metric the stream reported at all, must each appear in at least
/// that many iterations.
fn short_streams(
    samples: &[MetricsSample],
    expected: &BTreeSet<(String, String)>,
    repetitions: u32,
) -> Vec<String> {
    let mut counts: BTreeMap<(&str, &str), BTreeMap<Metric, u32>> = BTreeMap::new();
    for s in samples {
        let entry = counts.entry((&s.vm, &s.bench)).or_default();
        for m in s.metrics.keys() {
            *entry.entry(*m).or_default() += 1;
        }
    }
    expected
        .iter()
        .filter(|(vm, bench)| {
            let Some(c) = counts.get(&(vm.as_str(), bench.as_str())) else {
                return repetitions > 0;
            };
            c.get(&Metric::TimeMs).copied().unwrap_or(0) < repetitions || c.values().any(|&n| n < repetitions)
        })
        .map(|(vm, bench)| format!("{vm}/{bench}"))
        .collect()
}

/// Executes one setup. Raw logs are written under `results_dir` when given,
/// whatever the outcome.
pub fn run_setup(
    setup: &Setup,
    backend: &dyn Backend,
    repetitions: u32,
    timeout: Duration,
    results_dir: Option<&Path>,
) -> Result<RunRecord, OrchestratorError> {
    let run_id = run_id_for(setup);
    let started_at_ms = now_ms();
    let mut session = backend.start(setup, &run_id).map_err(|source| OrchestratorError::Start {
        setup_id: setup.id,
        setup_name: setup.name.clone(),
        source,
    })?;
    let expected = setup.expected_streams();
    let collected = collect(session.take_channels(), expected.clone(), Some(&run_id), timeout);
    session.stop();
    let ended_at_ms = now_ms();

    let mut raw_logs = BTreeMap::new();
    for (vm, lines) in &collected.raw {
        let rel = raw_log_path(&setup.name, vm);
        if let Some(dir) = results_dir {
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let mut text = lines.join("\n");
            if !lines.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        raw_logs.insert(vm.clone(), rel);
    }

    let mut warnings = collected.warnings.clone();
    let short = short_streams(&collected.samples, &expected, repetitions);
    if collected.complete() && !short.is_empty() {
        warnings.push(format!("fewer than {repetitions} samples: {}", short.join(", ")));
    }
    let status = if !collected.complete() || !short.is_empty() {
        RunStatus::Timeout
    } else if !collected.errors.is_empty() {
        RunStatus::ParseError
    } else {
        RunStatus::Complete
    };
    Ok(RunRecord {
        setup_id: setup.id,
        setup_name: setup.name.clone(),
        backend: backend.kind().to_string(),
        run_id,
        started_at_ms,
        ended_at_ms,
        repetitions,
        status,
        samples: collected.samples,
        raw_logs,
        errors: collected.errors,
        warnings,
        leftovers: collected.leftovers,
        unterminated: collected.unterminated.iter().map(|(vm, b)| format!("{vm}/{b}")).collect(),
    })
}

/// Regroups a record's raw logs from disk.
pub fn reparse_raw_logs(record: &RunRecord, results_dir: &Path, setup: &Setup) -> io::Result<Vec<MetricsSample>> {
    let mut texts = Vec::new();
    for (vm, rel) in &record.raw_logs {
        texts.push((vm.clone(), fs::read_to_string(results_dir.join(rel))?));
    }
    let lines = texts.iter().flat_map(|(vm, text)| text.lines().map(move |l| (vm.as_str(), l)));
    Ok(collect_lines(lines, setup.expected_streams(), Some(&record.run_id)).samples)
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<(), OrchestratorError> {
    let path = dir.join(record_file_name(record.setup_id));
    let mut text = serde_json::to_string_pretty(record).expect("run records serialize");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_record(path: &Path) -> io::Result<RunRecord> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Every `run_<id>.json` in `dir`, ordered by setup id.
pub fn load_records(dir: &Path) -> io::Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if name.starts_with("run_") && name.ends_with(".json") {
            records.push(read_record(&path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?);
        }
    }
    records.sort_by_key(|r| r.setup_id);
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; values above 1 need a deterministic backend.
    pub jobs: usize,
    /// Re-run setups that already have a complete record.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartFailure {
    pub setup_id: u32,
    pub setup_name: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub backend: String,
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    /// Status of every setup with a record, including skipped ones.
    pub counts: BTreeMap<RunStatus, usize>,
    pub start_failures: Vec<StartFailure>,
}

impl SweepSummary {
    pub fn all_complete(&self) -> bool {
        self.start_failures.is_empty() && self.counts.get(&RunStatus::Complete).copied().unwrap_or(0) == self.total
    }

    /// `complete:84 timeout:1`
    pub fn status_line(&self) -> String {
        let mut parts: Vec<String> = [RunStatus::Complete, RunStatus::Timeout, RunStatus::ParseError]
            .iter()
            .filter_map(|s| self.counts.get(s).map(|n| format!("{}:{n}", s.as_str())))
            .collect();
        if !self.start_failures.is_empty() {
            parts.push(format!("start_failed:{}", self.start_failures.len()));
        }
        if parts.is_empty() {
            parts.push("complete:0".into());
        }
        parts.join(" ")
    }
}

enum Outcome {
    Skipped(RunStatus),
    Ran(RunStatus),
    Failed(StartFailure),
}

fn existing_complete(dir: &Path, setup: &Setup) -> Option<RunStatus> {
    let record = read_record(&dir.join(record_file_name(setup.id))).ok()?;
    (record.setup_name == setup.name && record.status == RunStatus::Complete).then_some(record.status)
}

fn execute(setup: &Setup, backend: &dyn Backend, dir: &Path, force: bool) -> Result<Outcome, OrchestratorError> {
    if !force {
        if let Some(status) = existing_complete(dir, setup) {
            return Ok(Outcome::Skipped(status));
        }
    }
    let timeout = Duration::from_secs_f64(setup.timeout_s.max(0.0));
    match run_setup(setup, backend, setup.repetitions, timeout, Some(dir)) {
        Ok(record) => {
            write_record(dir, &record)?;
            Ok(Outcome::Ran(record.status))
        }
        Err(OrchestratorError::Start {
            setup_id,
            setup_name,
            source,
        }) => Ok(Outcome::Failed(StartFailure {
            setup_id,
            setup_name,
            error: source.to_string(),
        })),
        Err(e) => Err(e),
    }
}

/// Runs every setup of `manifest` in manifest order (or with `jobs`
/// workers), writing records and `sweep_summary.json` into `results_dir`.
pub fn run_sweep(
    manifest: &Manifest,
    backend: &dyn Backend,
    results_dir: &Path,
    opts: &SweepOptions,
) -> Result<SweepSummary, OrchestratorError> {
    let jobs = opts.jobs.max(1);
    if jobs > 1 && !backend.capabilities().deterministic {
        return Err(OrchestratorError::NotParallelizable);
    }
    fs::create_dir_all(results_dir).map_err(io_err(results_dir))?;

    let setups = &manifest.setups;
    let outcomes: Mutex<Vec<Option<Result<Outcome, OrchestratorError>>>> =
        Mutex::new((0..setups.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || {
        loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            let Some(setup) = setups.get(i) else { break };
            let outcome = execute(setup, backend, results_dir, opts.force);
            outcomes.lock().expect("outcome lock")[i] = Some(outcome);
        }
    };
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs.min(setups.len().max(1)) {
                s.spawn(worker);
            }
        });
    }

    let mut summary = SweepSummary {
        backend: backend.kind().to_string(),
        total: setups.len(),
        ..SweepSummary::default()
    };
    for outcome in outcomes.into_inner().expect("outcome lock") {
        match outcome.expect("every setup visited")? {
            Outcome::Skipped(status) => {
                summary.skipped += 1;
                *summary.counts.entry(status).or_default() += 1;
            }
            Outcome::Ran(status) => {
                summary.executed += 1;
                *summary.counts.entry(status).or_default() += 1;
            }
            Outcome::Failed(f) => {
                summary.executed += 1;
                summary.start_failures.push(f);
            }
        }
    }
    let path = results_dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(summary)
}
