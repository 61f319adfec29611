//! Baseline-relative slowdowns, summary statistics and exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genspace::{SetupNameParts, parse_setup_name, render_size};
use crate::metrics::Metric;
use crate::orchestrator::{RunRecord, RunStatus};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const CSV_HEADER: [&str; 8] = [
    "setup",
    "bench",
    "baseline",
    "slowdown",
    "llc_miss_ratio",
    "bus_cycles_ratio",
    "mem_access_ratio",
    "n",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no baseline for: {}", .0.join(", "))]
    MissingBaseline(Vec<String>),
    #[error("baseline `{baseline}` has zero mean time for `{bench}`")]
    ZeroBaseline { baseline: String, bench: String },
    #[error("setup `{setup}` has no time_ms samples for `{bench}`")]
    MissingTime { setup: String, bench: String },
    #[error("series must have at least 2 points")]
    ShortSeries,
    #[error("series is not sorted by color count")]
    Unsorted,
    #[error("no rows to export")]
    Empty,
    #[error("malformed report csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation; 0 for a single value.
    pub stdev: f64,
    pub n: usize,
}

impl AggregateStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let stdev = if n > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(AggregateStats {
            mean,
            median,
            min: sorted[0],
            max: sorted[n - 1],
            stdev,
            n,
        })
    }

    /// Same statistics after multiplying every value by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Self {
        AggregateStats {
            mean: self.mean * factor,
            median: self.median * factor,
            min: self.min * factor,
            max: self.max * factor,
            stdev: self.stdev * factor,
            n: self.n,
        }
    }
}

/// Statistics for one (setup, vm, bench) stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub setup: String,
    pub vm: String,
    pub bench: String,
    pub metrics: BTreeMap<Metric, AggregateStats>,
}

impl StreamStats {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.metrics.get(&metric).map(|s| s.mean)
    }
}

pub fn stream_stats(record: &RunRecord) -> Vec<StreamStats> {
    let mut values: BTreeMap<(&str, &str), BTreeMap<Metric, Vec<f64>>> = BTreeMap::new();
    for s in &record.samples {
        let entry = values.entry((&s.vm, &s.bench)).or_default();
        for (m, v) in &s.metrics {
            entry.entry(*m).or_default().push(v.as_f64());
        }
    }
    values
        .into_iter()
        .map(|((vm, bench), metrics)| StreamStats {
            setup: record.setup_name.clone(),
            vm: vm.to_string(),
            bench: bench.to_string(),
            metrics: metrics
                .into_iter()
                .filter_map(|(m, v)| AggregateStats::from_values(&v).map(|s| (m, s)))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowdownRow {
    pub setup: String,
    pub bench: String,
    pub baseline: String,
    pub slowdown: f64,
    pub llc_miss_ratio: Option<f64>,
    pub bus_cycles_ratio: Option<f64>,
    pub mem_access_ratio: Option<f64>,
    pub n: usize,
}

/// Baseline name for one setup name, given the names available.
fn baseline_for(name: &str, available: &BTreeSet<&str>) -> Option<String> {
    let parts = parse_setup_name(name).ok()?;
    let has = |n: &str| available.contains(n);
    if parts.access.is_none() {
        // `solo` is its own baseline; colored and regulated solos compare
        // against it to expose the cost of partitioning itself.
        return has("solo").then(|| "solo".to_string());
    }
    if parts.colors.is_some() {
        let colored = SetupNameParts {
            colors: parts.colors.clone(),
            ..SetupNameParts::default()
        }
        .to_string();
        if has(&colored) {
            return Some(colored);
        }
    }
    has("solo").then(|| "solo".to_string())
}

/// Maps every setup name to its baseline: `solo` for uncolored setups,
/// `solo_cc_<k>` for `_cc_<k>` setups when that variant exists.
pub fn baseline_match<'a, I>(names: I) -> Result<BTreeMap<String, String>, ReportError>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: Vec<&str> = names.into_iter().collect();
    let available: BTreeSet<&str> = names.iter().copied().collect();
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for name in names {
        match baseline_for(name, &available) {
            Some(b) => {
                out.insert(name.to_string(), b);
            }
            None => missing.push(name.to_string()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(ReportError::MissingBaseline(missing))
    }
}

fn ratio(setup: &StreamStats, base: &StreamStats, metric: Metric) -> Option<f64> {
    let b = base.mean(metric)?;
    let s = setup.mean(metric)?;
    (b != 0.0).then(|| s / b)
}

/// Mean-time ratio of `setup` over `baseline`, plus event-count ratios
/// where both sides report the event.
pub fn slowdown(setup: &StreamStats, baseline: &StreamStats) -> Result<SlowdownRow, ReportError> {
    let missing = |s: &StreamStats| ReportError::MissingTime {
        setup: s.setup.clone(),
        bench: s.bench.clone(),
    };
    let t = setup.metrics.get(&Metric::TimeMs).ok_or_else(|| missing(setup))?;
    let b = baseline.mean(Metric::TimeMs).ok_or_else(|| missing(baseline))?;
    if b == 0.0 {
        return Err(ReportError::ZeroBaseline {
            baseline: baseline.setup.clone(),
            bench: baseline.bench.clone(),
        });
    }
    Ok(SlowdownRow {
        setup: setup.setup.clone(),
        bench: setup.bench.clone(),
        baseline: baseline.setup.clone(),
        slowdown: t.mean / b,
        llc_miss_ratio: ratio(setup, baseline, Metric::LlcMiss),
        bus_cycles_ratio: ratio(setup, baseline, Metric::BusCycles),
        mem_access_ratio: ratio(setup, baseline, Metric::MemAccess),
        n: t.n,
    })
}

/// Everything the exporters need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<SlowdownRow>,
    pub stats: Vec<StreamStats>,
    /// Records left out because they did not complete.
    pub skipped: Vec<String>,
}

impl Report {
    fn find(&self, setup: &str, vm: &str, bench: &str) -> Option<&StreamStats> {
        self.stats.iter().find(|s| s.setup == setup && s.vm == vm && s.bench == bench)
    }

    /// Slowdown of a setup stream against the plain `solo` run.
    pub fn vs_solo(&self, setup: &str, vm: &str, bench: &str) -> Option<f64> {
        let s = self.find(setup, vm, bench)?;
        let b = self.find("solo", vm, bench)?;
        slowdown(s, b).ok().map(|r| r.slowdown)
    }

    /// Worst slowdown per bench: (bench, setup, slowdown).
    pub fn worst_per_bench(&self) -> Vec<(String, String, f64)> {
        let mut worst: BTreeMap<&str, &SlowdownRow> = BTreeMap::new();
        for row in &self.rows {
            let e = worst.entry(&row.bench).or_insert(row);
            if row.slowdown > e.slowdown {
                *e = row;
            }
        }
        worst
            .into_iter()
            .map(|(b, r)| (b.to_string(), r.setup.clone(), r.slowdown))
            .collect()
    }
}

/// Builds slowdown rows for every complete record, in record order.
pub fn build_report(records: &[RunRecord]) -> Result<Report, ReportError> {
    let mut report = Report::default();
    let mut used = Vec::new();
    for r in records {
        if r.status == RunStatus::Complete {
            used.push(r);
        } else {
            report.skipped.push(format!("{} ({})", r.setup_name, r.status.as_str()));
        }
    }
    let baselines = baseline_match(used.iter().map(|r| r.setup_name.as_str()))?;
    for r in &used {
        report.stats.extend(stream_stats(r));
    }
    for r in &used {
        let base = &baselines[&r.setup_name];
        let streams = stream_stats(r);
        let multi_vm = streams.iter().map(|s| &s.vm).collect::<BTreeSet<_>>().len() > 1;
        for s in &streams {
            let b = report
                .find(base, &s.vm, &s.bench)
                .ok_or_else(|| ReportError::MissingBaseline(vec![format!("{}:{}/{}", r.setup_name, s.vm, s.bench)]))?;
            let mut row = slowdown(s, b)?;
            if multi_vm {
                row.bench = format!("{}:{}", s.vm, s.bench);
            }
            report.rows.push(row);
        }
    }
    Ok(report)
}

fn fmt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[SlowdownRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.setup.clone(),
            r.bench.clone(),
            r.baseline.clone(),
            fmt2(Some(r.slowdown)),
            fmt2(r.llc_miss_ratio),
            fmt2(r.bus_cycles_ratio),
            fmt2(r.mem_access_ratio),
            r.n.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SlowdownRow>, ReportError> {
    let bad = |m: String| ReportError::Csv(m);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let num = |s: &str| -> Result<Option<f64>, ReportError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
        }
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(SlowdownRow {
            setup: rec[0].to_string(),
            bench: rec[1].to_string(),
            baseline: rec[2].to_string(),
            slowdown: num(&rec[3])?.ok_or_else(|| bad("missing slowdown".into()))?,
            llc_miss_ratio: num(&rec[4])?,
            bus_cycles_ratio: num(&rec[5])?,
            mem_access_ratio: num(&rec[6])?,
            n: rec[7].parse().map_err(|_| bad(format!("bad n `{}`", &rec[7])))?,
        });
    }
    Ok(rows)
}

/// Smallest color count after which every further step improves the
/// slowdown by less than `epsilon`; the largest count when there is none.
pub fn diminishing_returns(series: &[(u32, f64)], epsilon: f64) -> Result<u32, ReportError> {
    if series.len() < 2 {
        return Err(ReportError::ShortSeries);
    }
    if series.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(ReportError::Unsorted);
    }
    let mut knee = series.len() - 1;
    for i in (0..series.len() - 1).rev() {
        if series[i].1 - series[i + 1].1 < epsilon {
            knee = i;
        } else {
            break;
        }
    }
    Ok(series[knee].0)
}

/// One plot series file: `plotdata/<figure>/<bench>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub figure: String,
    pub bench: String,
    pub y_label: &'static str,
    /// Sorted by x.
    pub points: Vec<(String, f64)>,
}

fn colored_x(parts: &SetupNameParts) -> u32 {
    parts.colors.as_ref().and_then(|c| c.first().copied()).unwrap_or(0)
}

/// Figure series:
/// - `buffer_<access>`: slowdown against buffer size, uncolored and unregulated;
/// - `colors_<access>_<size>`: slowdown against the first guest's color count
///   (0 = no coloring), relative to plain `solo`;
/// - `solo_colors`: colored solo runs relative to plain `solo`;
/// - `pmu_<event>`: event ratios per setup from the report rows.
pub fn plot_series(report: &Report) -> Vec<Series> {
    type Key = (String, String);
    type SetupKey = (String, String, &'static str);
    let mut numeric: BTreeMap<Key, Vec<(u64, f64)>> = BTreeMap::new();
    let mut by_setup: BTreeMap<SetupKey, Vec<(String, f64)>> = BTreeMap::new();
    for s in &report.stats {
        let Ok(parts) = parse_setup_name(&s.setup) else { continue };
        if !parts.mbr.iter().all(Option::is_none) {
            continue;
        }
        let Some(y) = report.vs_solo(&s.setup, &s.vm, &s.bench) else { continue };
        let bench = if report.stats.iter().any(|o| o.bench == s.bench && o.vm != s.vm) {
            format!("{}:{}", s.vm, s.bench)
        } else {
            s.bench.clone()
        };
        let mut extra = String::new();
        if let Some(m) = parts.cpus {
            extra.push_str(&format!("_cpus{m}"));
        }
        if let Some(l) = parts.stride_bytes {
            extra.push_str(&format!("_stride{}", render_size(l)));
        }
        match (parts.access, parts.buffer_bytes) {
            (Some(access), Some(size)) => {
                if parts.colors.is_none() {
                    numeric
                        .entry((format!("buffer_{}{extra}", access.name_token()), bench.clone()))
                        .or_default()
                        .push((size, y));
                }
                numeric
                    .entry((format!("colors_{}_{}{extra}", access.name_token(), render_size(size)), bench))
                    .or_default()
                    .push((u64::from(colored_x(&parts)), y));
            }
            _ => {
                numeric
                    .entry(("solo_colors".to_string(), bench))
                    .or_default()
                    .push((u64::from(colored_x(&parts)), y));
            }
        }
    }
    for row in &report.rows {
        for (name, v) in [
            ("pmu_llc_miss", row.llc_miss_ratio),
            ("pmu_bus_cycles", row.bus_cycles_ratio),
            ("pmu_mem_access", row.mem_access_ratio),
        ] {
            if let Some(v) = v {
                by_setup
                    .entry((name.to_string(), row.bench.clone(), "ratio"))
                    .or_default()
                    .push((row.setup.clone(), v));
            }
        }
    }
    let mut out = Vec::new();
    for ((figure, bench), mut pts) in numeric {
        pts.sort_by_key(|a| a.0);
        out.push(Series {
            figure,
            bench,
            y_label: "slowdown",
            points: pts.into_iter().map(|(x, y)| (x.to_string(), y)).collect(),
        });
    }
    for ((figure, bench, label), pts) in by_setup {
        out.push(Series {
            figure,
            bench,
            y_label: label,
            points: pts,
        });
    }
    out
}

fn series_csv(series: &Series) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", series.y_label]).expect("in-memory csv");
    for (x, y) in &series.points {
        w.write_record([x.clone(), format!("{y}")]).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Plotdata,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "plotdata" => Ok(Format::Plotdata),
            other => Err(format!("unknown format `{other}` (expected csv, json or plotdata)")),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `report` to `out`: a file for csv and json, a directory for
/// plotdata. Returns the files written.
pub fn export(report: &Report, format: Format, out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if report.rows.is_empty() {
        return Err(ReportError::Empty);
    }
    match format {
        Format::Csv => {
            write_file(out, &rows_to_csv(&report.rows))?;
            Ok(vec![out.to_path_buf()])
        }
        Format::Json => {
            let mut text = serde_json::to_string_pretty(&report.rows).expect("rows serialize");
            text.push('\n');
            write_file(out, &text)?;
            Ok(vec![out.to_path_buf()])
        }
        Format::Plotdata => {
            let mut written = Vec::new();
            for s in plot_series(report) {
                let path = out.join(&s.figure).join(format!("{}.csv", s.bench));
                write_file(&path, &series_csv(&s))?;
                written.push(path);
            }
            Ok(written)
        }
    }
}
