//! Metric line protocol and per-VM log collection.
//!
//! Guests print lines of the form
//!
//! ```text
//! SPIM;v1;<run_id>;<vm>;<bench>;<iteration>;<metric>;<value>
//! SPIM;v1;<run_id>;<vm>;<bench>;END
//! ```
//!
//! Anything not starting with `SPIM;` is console noise and ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Decimal3, DecimalError, Metric, MetricsSample};

pub const PREFIX: &str = "SPIM;";
pub const VERSION: &str = "v1";
const END: &str = "END";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Metric {
        iteration: u32,
        metric: Metric,
        value: Decimal3,
    },
    /// Closes the (vm, bench) stream.
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricEvent {
    pub run_id: String,
    pub vm: String,
    pub bench: String,
    pub kind: EventKind,
}

impl MetricEvent {
    pub fn metric(
        run_id: impl Into<String>,
        vm: impl Into<String>,
        bench: impl Into<String>,
        iteration: u32,
        metric: Metric,
        value: Decimal3,
    ) -> Self {
        MetricEvent {
            run_id: run_id.into(),
            vm: vm.into(),
            bench: bench.into(),
            kind: EventKind::Metric { iteration, metric, value },
        }
    }

    pub fn end(run_id: impl Into<String>, vm: impl Into<String>, bench: impl Into<String>) -> Self {
        MetricEvent {
            run_id: run_id.into(),
            vm: vm.into(),
            bench: bench.into(),
            kind: EventKind::End,
        }
    }

    pub fn stream(&self) -> (String, String) {
        (self.vm.clone(), self.bench.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Event(MetricEvent),
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseReason {
    #[error("malformed field count ({0} fields)")]
    FieldCount(usize),
    #[error("unsupported protocol version `{0}`")]
    Version(String),
    #[error("empty {0} field")]
    EmptyField(&'static str),
    #[error("bad iteration `{0}`")]
    Iteration(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("non-numeric value")]
    NonNumeric,
    #[error("value out of range")]
    Overflow,
}

/// A `SPIM;` line that does not follow the grammar.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}: `{line}`")]
pub struct ParseError {
    pub line: String,
    pub reason: ParseReason,
}

pub fn parse_line(text: &str) -> Result<Parsed, ParseError> {
    let line = text.trim_end_matches(['\n', '\r']);
    let Some(rest) = line.strip_prefix(PREFIX) else {
        return Ok(Parsed::Ignored);
    };
    let fail = |reason| ParseError {
        line: line.to_string(),
        reason,
    };
    let fields: Vec<&str> = rest.split(';').collect();
    if fields.len() != 5 && fields.len() != 7 {
        return Err(fail(ParseReason::FieldCount(fields.len() + 1)));
    }
    if fields[0] != VERSION {
        return Err(fail(ParseReason::Version(fields[0].to_string())));
    }
    for (name, value) in ["run_id", "vm", "bench"].iter().zip(&fields[1..4]) {
        if value.is_empty() {
            return Err(fail(ParseReason::EmptyField(name)));
        }
    }
    let (run_id, vm, bench) = (fields[1], fields[2], fields[3]);
    if fields.len() == 5 {
        if fields[4] != END {
            return Err(fail(ParseReason::FieldCount(6)));
        }
        return Ok(Parsed::Event(MetricEvent::end(run_id, vm, bench)));
    }
    let iter_text = fields[4];
    if iter_text.is_empty() || !iter_text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(fail(ParseReason::Iteration(iter_text.to_string())));
    }
    let iteration: u32 = iter_text.parse().map_err(|_| fail(ParseReason::Iteration(iter_text.to_string())))?;
    let metric: Metric = fields[5]
        .parse()
        .map_err(|()| fail(ParseReason::UnknownMetric(fields[5].to_string())))?;
    let value: Decimal3 = fields[6].parse().map_err(|e| {
        fail(match e {
            DecimalError::NonNumeric => ParseReason::NonNumeric,
            DecimalError::Overflow => ParseReason::Overflow,
        })
    })?;
    Ok(Parsed::Event(MetricEvent::metric(run_id, vm, bench, iteration, metric, value)))
}

/// Canonical rendering without the trailing newline.
pub fn emit_line(event: &MetricEvent) -> String {
    let head = format!("{PREFIX}{VERSION};{};{};{}", event.run_id, event.vm, event.bench);
    match &event.kind {
        EventKind::Metric { iteration, metric, value } => format!("{head};{iteration};{metric};{value}"),
        EventKind::End => format!("{head};{END}"),
    }
}

/// Lines for a whole benchmark stream: every metric of every sample, then END.
pub fn emit_stream(run_id: &str, samples: &[MetricsSample]) -> Vec<String> {
    let mut lines = Vec::new();
    let mut last: Option<(&str, &str)> = None;
    for s in samples {
        if let Some((vm, bench)) = last {
            if (vm, bench) != (s.vm.as_str(), s.bench.as_str()) {
                lines.push(emit_line(&MetricEvent::end(run_id, vm, bench)));
            }
        }
        for (&metric, &value) in &s.metrics {
            lines.push(emit_line(&MetricEvent::metric(run_id, &s.vm, &s.bench, s.iteration, metric, value)));
        }
        last = Some((&s.vm, &s.bench));
    }
    if let Some((vm, bench)) = last {
        lines.push(emit_line(&MetricEvent::end(run_id, vm, bench)));
    }
    lines
}

/// A malformed line and the channel it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub channel: String,
    pub line: String,
    pub reason: String,
}

/// An event that arrived after its stream's END.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leftover {
    pub channel: String,
    pub line: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collected {
    /// Sorted by (vm, bench, iteration).
    pub samples: Vec<MetricsSample>,
    pub ended: BTreeSet<(String, String)>,
    /// Expected streams that never produced END.
    pub unterminated: BTreeSet<(String, String)>,
    pub timed_out: bool,
    pub errors: Vec<LineError>,
    pub leftovers: Vec<Leftover>,
    pub warnings: Vec<String>,
    /// Every line received, per channel, in arrival order.
    pub raw: BTreeMap<String, Vec<String>>,
}

impl Collected {
    pub fn complete(&self) -> bool {
        !self.timed_out && self.unterminated.is_empty()
    }
}

/// Grouping state shared by live collection and log reparsing.
#[derive(Debug, Default)]
pub struct Accumulator {
    expected: BTreeSet<(String, String)>,
    run_id: Option<String>,
    groups: BTreeMap<(String, String, u32), MetricsSample>,
    ended: BTreeSet<(String, String)>,
    errors: Vec<LineError>,
    leftovers: Vec<Leftover>,
    warnings: Vec<String>,
    raw: BTreeMap<String, Vec<String>>,
}

impl Accumulator {
    /// `run_id`, when given, drops events from other runs with a warning.
    pub fn new(expected: BTreeSet<(String, String)>, run_id: Option<&str>) -> Self {
        Accumulator {
            expected,
            run_id: run_id.map(str::to_string),
            ..Accumulator::default()
        }
    }

    pub fn add_channel(&mut self, channel: &str) {
        self.raw.entry(channel.to_string()).or_default();
    }

    pub fn all_ended(&self) -> bool {
        self.expected.is_subset(&self.ended)
    }

    pub fn feed(&mut self, channel: &str, line: &str) {
        let line = line.trim_end_matches(['\n', '\r']);
        self.raw.entry(channel.to_string()).or_default().push(line.to_string());
        let event = match parse_line(line) {
            Ok(Parsed::Ignored) => return,
            Ok(Parsed::Event(e)) => e,
            Err(e) => {
                self.errors.push(LineError {
                    channel: channel.to_string(),
                    line: e.line,
                    reason: e.reason.to_string(),
                });
                return;
            }
        };
        if let Some(run) = &self.run_id {
            if &event.run_id != run {
                self.warnings.push(format!("{channel}: ignoring line from run `{}`: {line}", event.run_id));
                return;
            }
        }
        let stream = event.stream();
        if self.ended.contains(&stream) {
            self.leftovers.push(Leftover {
                channel: channel.to_string(),
                line: line.to_string(),
            });
            return;
        }
        match event.kind {
            EventKind::End => {
                self.ended.insert(stream);
            }
            EventKind::Metric { iteration, metric, value } => {
                let sample = self
                    .groups
                    .entry((event.vm.clone(), event.bench.clone(), iteration))
                    .or_insert_with(|| MetricsSample::new(&event.vm, &event.bench, iteration));
                if let Some(old) = sample.get(metric) {
                    self.warnings.push(format!(
                        "duplicate {metric} for {}/{} iteration {iteration}: {old} replaced by {value}",
                        event.vm, event.bench
                    ));
                }
                sample.set(metric, value);
            }
        }
    }

    pub fn finish(self, timed_out: bool) -> Collected {
        let unterminated = self.expected.difference(&self.ended).cloned().collect();
        let mut warnings = self.warnings;
        let extra: BTreeSet<(String, String)> = self
            .groups
            .keys()
            .map(|(vm, bench, _)| (vm.clone(), bench.clone()))
            .filter(|s| !self.expected.contains(s))
            .collect();
        for (vm, bench) in extra {
            warnings.push(format!("unexpected stream {vm}/{bench}"));
        }
        Collected {
            samples: self.groups.into_values().collect(),
            ended: self.ended,
            unterminated,
            timed_out,
            errors: self.errors,
            leftovers: self.leftovers,
            warnings,
            raw: self.raw,
        }
    }
}

/// Groups already-captured lines, e.g. raw logs read back from disk.
pub fn collect_lines<'a, I>(lines: I, expected: BTreeSet<(String, String)>, run_id: Option<&str>) -> Collected
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut acc = Accumulator::new(expected, run_id);
    for (channel, line) in lines {
        acc.feed(channel, line);
    }
    let done = acc.all_ended();
    acc.finish(!done)
}

/// A named stream of text lines from one VM.
pub struct Channel {
    pub name: String,
    pub rx: Receiver<String>,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel").field("name", &self.name).finish_non_exhaustive()
    }
}

/// How long to keep listening for stray lines once every stream has ended
/// but some channel is still open.
const SETTLE: Duration = Duration::from_millis(200);

/// Consumes `channels` until every expected stream has ended and every
/// channel has closed (or gone quiet), or until `timeout` elapses.
pub fn collect(
    channels: Vec<Channel>,
    expected: BTreeSet<(String, String)>,
    run_id: Option<&str>,
    timeout: Duration,
) -> Collected {
    let deadline = Instant::now() + timeout;
    let mut acc = Accumulator::new(expected, run_id);
    let (tx, rx) = mpsc::channel::<(usize, Option<String>)>();
    let names: Vec<String> = channels.iter().map(|c| c.name.clone()).collect();
    for name in &names {
        acc.add_channel(name);
    }
    for (idx, ch) in channels.into_iter().enumerate() {
        let tx = tx.clone();
        thread::spawn(move || {
            for line in ch.rx.iter() {
                if tx.send((idx, Some(line))).is_err() {
                    return;
                }
            }
            let _ = tx.send((idx, None));
        });
    }
    drop(tx);

    let mut open = names.len();
    let mut timed_out = false;
    while open > 0 {
        let now = Instant::now();
        if now >= deadline {
            timed_out = true;
            break;
        }
        let mut wait = deadline - now;
        if acc.all_ended() {
            wait = wait.min(SETTLE);
        }
        match rx.recv_timeout(wait) {
            Ok((idx, Some(line))) => acc.feed(&names[idx], &line),
            Ok((_, None)) => open -= 1,
            Err(RecvTimeoutError::Timeout) => {
                if !acc.all_ended() {
                    timed_out = true;
                }
                break;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    let done = acc.all_ended();
    acc.finish(timed_out || !done)
}
