//! Platform and experiment descriptions.
//!
//! Both documents are JSON. Parsing happens in two passes: serde maps the
//! document onto a raw shape (schema errors carry the JSON path of the
//! offending field), then validation checks cross-field invariants and
//! reports the path of the field that violates them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at `{path}`: {message}")]
    Invariant { path: String, message: String },
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    pub fn path(&self) -> &str {
        match self {
            ConfigError::Schema { path, .. }
            | ConfigError::Invariant { path, .. }
            | ConfigError::Io { path, .. } => path,
        }
    }

    fn invariant(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invariant {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn from_json<T: DeserializeOwned>(text: &str, prefix: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| schema_error(prefix, e))
}

fn from_value<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| schema_error(prefix, e))
}

fn schema_error(prefix: &str, e: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let inner = e.path().to_string();
    let path = match (prefix.is_empty(), inner.as_str()) {
        (true, _) => inner.clone(),
        (false, ".") => prefix.to_string(),
        (false, _) => format!("{prefix}.{inner}"),
    };
    ConfigError::Schema {
        path,
        message: e.into_inner().to_string(),
    }
}

// ---------------------------------------------------------------------------
// Platform
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    #[default]
    Lru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeom {
    pub size_bytes: u64,
    pub ways: u32,
    /// Derived: `size_bytes / (ways * line_bytes)`.
    pub sets: u32,
    pub policy: ReplacementPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformSpec {
    pub name: String,
    pub cpu_count: u32,
    pub clock_hz: u64,
    pub line_bytes: u64,
    pub page_bytes: u64,
    pub l1: CacheGeom,
    pub l2: CacheGeom,
    pub color_count: u32,
}

impl PlatformSpec {
    /// Number of page colors the L2 geometry can distinguish.
    pub fn hardware_colors(&self) -> u64 {
        u64::from(self.l2.sets) * self.line_bytes / self.page_bytes
    }

    /// Mask with every configured color set.
    pub fn full_mask(&self) -> u64 {
        full_mask(self.color_count)
    }

    /// Cycles in one microsecond, rounded down (at least 1).
    pub fn cycles_per_us(&self) -> u64 {
        (self.clock_hz / 1_000_000).max(1)
    }
}

pub(crate) fn full_mask(colors: u32) -> u64 {
    if colors >= 64 {
        u64::MAX
    } else {
        (1u64 << colors) - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheDoc {
    size_bytes: u64,
    ways: u32,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    policy: Option<ReplacementPolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformDoc {
    name: String,
    cpu_count: u32,
    clock_hz: u64,
    line_bytes: u64,
    page_bytes: u64,
    l1: CacheDoc,
    l2: CacheDoc,
    color_count: u32,
}

fn positive(path: &str, value: u64) -> Result<(), ConfigError> {
    if value == 0 {
        Err(ConfigError::invariant(path, "must be positive"))
    } else {
        Ok(())
    }
}

fn geometry(path: &str, doc: &CacheDoc, line_bytes: u64) -> Result<CacheGeom, ConfigError> {
    positive(&format!("{path}.size_bytes"), doc.size_bytes)?;
    positive(&format!("{path}.ways"), u64::from(doc.ways))?;
    let way_bytes = u64::from(doc.ways) * line_bytes;
    if !doc.size_bytes.is_multiple_of(way_bytes) {
        return Err(ConfigError::invariant(
            format!("{path}.size_bytes"),
            format!(
                "cache geometry invariant violated: size_bytes ({}) must equal ways ({}) x sets x line_bytes ({})",
                doc.size_bytes, doc.ways, line_bytes
            ),
        ));
    }
    let sets = doc.size_bytes / way_bytes;
    let sets = u32::try_from(sets)
        .map_err(|_| ConfigError::invariant(format!("{path}.size_bytes"), "too many sets"))?;
    Ok(CacheGeom {
        size_bytes: doc.size_bytes,
        ways: doc.ways,
        sets,
        policy: ReplacementPolicy::Lru,
    })
}

/// Parses and validates a `platform.json` document.
pub fn parse_platform(document: &str) -> Result<PlatformSpec, ConfigError> {
    let doc: PlatformDoc = from_json(document, "")?;
    if doc.name.trim().is_empty() {
        return Err(ConfigError::invariant("name", "must not be empty"));
    }
    positive("cpu_count", u64::from(doc.cpu_count))?;
    if doc.cpu_count > 64 {
        return Err(ConfigError::invariant("cpu_count", "at most 64 CPUs are supported"));
    }
    positive("clock_hz", doc.clock_hz)?;
    if !doc.line_bytes.is_power_of_two() {
        return Err(ConfigError::invariant("line_bytes", "must be a positive power of two"));
    }
    if !doc.page_bytes.is_power_of_two() {
        return Err(ConfigError::invariant("page_bytes", "must be a positive power of two"));
    }
    if !doc.page_bytes.is_multiple_of(doc.line_bytes) {
        return Err(ConfigError::invariant("page_bytes", "line_bytes must divide page_bytes"));
    }
    let l1 = geometry("l1", &doc.l1, doc.line_bytes)?;
    let l2 = geometry("l2", &doc.l2, doc.line_bytes)?;
    let spec = PlatformSpec {
        name: doc.name,
        cpu_count: doc.cpu_count,
        clock_hz: doc.clock_hz,
        line_bytes: doc.line_bytes,
        page_bytes: doc.page_bytes,
        l1,
        l2,
        color_count: doc.color_count,
    };
    if spec.color_count == 0 {
        return Err(ConfigError::invariant("color_count", "must be at least 1"));
    }
    let hw = spec.hardware_colors();
    if u64::from(spec.color_count) > hw.max(1) || spec.color_count > 64 {
        return Err(ConfigError::invariant(
            "color_count",
            format!(
                "color invariant violated: color_count ({}) exceeds the {} page colors of the L2 geometry",
                spec.color_count, hw
            ),
        ));
    }
    Ok(spec)
}

/// Canonical JSON rendering of a platform; `parse_platform` inverts it.
pub fn emit_platform(spec: &PlatformSpec) -> String {
    let doc = PlatformDoc {
        name: spec.name.clone(),
        cpu_count: spec.cpu_count,
        clock_hz: spec.clock_hz,
        line_bytes: spec.line_bytes,
        page_bytes: spec.page_bytes,
        l1: CacheDoc {
            size_bytes: spec.l1.size_bytes,
            ways: spec.l1.ways,
            policy: None,
        },
        l2: CacheDoc {
            size_bytes: spec.l2.size_bytes,
            ways: spec.l2.ways,
            policy: None,
        },
        color_count: spec.color_count,
    };
    serde_json::to_string_pretty(&doc).expect("platform serializes")
}

pub fn load_platform(path: &Path) -> Result<PlatformSpec, ConfigError> {
    let text = read(path)?;
    parse_platform(&text)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuestKind {
    VictimBenchmark,
    ContentionEngine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Read,
    Write,
    ReadWrite,
}

impl OpType {
    /// Spelling used in setup names.
    pub fn name_token(self) -> &'static str {
        match self {
            OpType::Read => "read",
            OpType::Write => "write",
            OpType::ReadWrite => "readwrite",
        }
    }

    pub fn from_name_token(token: &str) -> Option<Self> {
        match token {
            "read" => Some(OpType::Read),
            "write" => Some(OpType::Write),
            "readwrite" => Some(OpType::ReadWrite),
            _ => None,
        }
    }
}

/// Synthetic stand-in for a victim benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimPreset {
    pub bench_name: String,
    pub working_set_bytes: u64,
    pub total_accesses: u64,
    pub compute_cycles_per_access: u64,
    pub write_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentionSweep {
    pub cpu_configs: Vec<u32>,
    pub line_strides: Vec<u64>,
    pub workload_sizes: Vec<u64>,
    pub op_types: Vec<OpType>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    /// Benchmarks run back to back on the guest's first CPU.
    Victim(Vec<VictimPreset>),
    Contention(ContentionSweep),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuestSpec {
    pub name: String,
    pub kind: GuestKind,
    /// Sorted, distinct CPU indices.
    pub cpus: Vec<u32>,
    pub workload: Workload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColoringSpec {
    pub enabled: bool,
    #[serde(default)]
    pub min_colors_per_vm: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MbrMode {
    #[default]
    PerGuestSweep,
    CrossProduct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbrSpec {
    pub enabled: bool,
    #[serde(default)]
    pub budgets: Vec<Vec<u64>>,
    #[serde(default)]
    pub periods_us: Vec<Vec<u64>>,
    #[serde(default)]
    pub mode: MbrMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Replay,
    Serial,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Sim => "sim",
            BackendKind::Replay => "replay",
            BackendKind::Serial => "serial",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "replay" => Ok(BackendKind::Replay),
            "serial" => Ok(BackendKind::Serial),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// Path of the platform document, as written in the experiment.
    pub platform: String,
    pub guests: Vec<GuestSpec>,
    pub coloring: ColoringSpec,
    pub mbr: MbrSpec,
    pub repetitions: u32,
    pub timeout_s: f64,
    pub backend: BackendKind,
}

impl ExperimentSpec {
    pub fn engine(&self) -> Option<(usize, &GuestSpec)> {
        self.guests
            .iter()
            .enumerate()
            .find(|(_, g)| g.kind == GuestKind::ContentionEngine)
    }

    pub fn victims(&self) -> impl Iterator<Item = (usize, &GuestSpec)> {
        self.guests
            .iter()
            .enumerate()
            .filter(|(_, g)| g.kind == GuestKind::VictimBenchmark)
    }
}

pub const DEFAULT_REPETITIONS: u32 = 10;
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}

fn default_backend() -> String {
    "sim".to_string()
}

fn default_coloring() -> ColoringSpec {
    ColoringSpec {
        enabled: false,
        min_colors_per_vm: Vec::new(),
    }
}

fn default_mbr() -> MbrSpec {
    MbrSpec {
        enabled: false,
        budgets: Vec::new(),
        periods_us: Vec::new(),
        mode: MbrMode::PerGuestSweep,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GuestDoc {
    name: String,
    kind: GuestKind,
    cpus: Vec<u32>,
    workload: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentDoc {
    platform: String,
    guests: Vec<GuestDoc>,
    #[serde(default = "default_coloring")]
    coloring: ColoringSpec,
    #[serde(default = "default_mbr")]
    mbr: MbrSpec,
    #[serde(default = "default_repetitions")]
    repetitions: u32,
    #[serde(default = "default_timeout")]
    timeout_s: f64,
    #[serde(default = "default_backend")]
    backend: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VictimWorkloadDoc {
    One(VictimPreset),
    Many(Vec<VictimPreset>),
}

/// Identifiers end up in file names and in `;`-separated protocol lines.
fn check_identifier(path: &str, value: &str) -> Result<(), ConfigError> {
    let ok = !value.is_empty()
        && value
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && value != "."
        && value != "..";
    if ok {
        Ok(())
    } else {
        Err(ConfigError::invariant(
            path,
            format!("`{value}` must be non-empty and use only [A-Za-z0-9_.-]"),
        ))
    }
}

fn check_distinct<T: Ord + Copy + fmt::Debug>(path: &str, values: &[T]) -> Result<(), ConfigError> {
    let mut seen = BTreeSet::new();
    for (i, v) in values.iter().enumerate() {
        if !seen.insert(*v) {
            return Err(ConfigError::invariant(
                format!("{path}[{i}]"),
                format!("duplicate entry {v:?}"),
            ));
        }
    }
    Ok(())
}

fn parse_guest(
    index: usize,
    doc: GuestDoc,
    platform: &PlatformSpec,
) -> Result<GuestSpec, ConfigError> {
    let base = format!("guests[{index}]");
    check_identifier(&format!("{base}.name"), &doc.name)?;
    if doc.cpus.is_empty() {
        return Err(ConfigError::invariant(format!("{base}.cpus"), "at least one CPU is required"));
    }
    for (i, &cpu) in doc.cpus.iter().enumerate() {
        if cpu >= platform.cpu_count {
            return Err(ConfigError::invariant(
                format!("{base}.cpus[{i}]"),
                format!("CPU {cpu} out of range [0, {})", platform.cpu_count),
            ));
        }
    }
    check_distinct(&format!("{base}.cpus"), &doc.cpus)?;
    let mut cpus = doc.cpus;
    cpus.sort_unstable();

    let wpath = format!("{base}.workload");
    let workload = match doc.kind {
        GuestKind::VictimBenchmark => {
            let presets = match from_value::<VictimWorkloadDoc>(doc.workload, &wpath)? {
                VictimWorkloadDoc::One(p) => vec![p],
                VictimWorkloadDoc::Many(v) => v,
            };
            if presets.is_empty() {
                return Err(ConfigError::invariant(&wpath, "at least one benchmark preset is required"));
            }
            let mut names = BTreeSet::new();
            for (i, p) in presets.iter().enumerate() {
                let ppath = format!("{wpath}[{i}]");
                check_identifier(&format!("{ppath}.bench_name"), &p.bench_name)?;
                if !names.insert(p.bench_name.as_str()) {
                    return Err(ConfigError::invariant(
                        format!("{ppath}.bench_name"),
                        format!("duplicate benchmark `{}`", p.bench_name),
                    ));
                }
                positive(&format!("{ppath}.working_set_bytes"), p.working_set_bytes)?;
                positive(&format!("{ppath}.total_accesses"), p.total_accesses)?;
                if !(0.0..=1.0).contains(&p.write_fraction) {
                    return Err(ConfigError::invariant(
                        format!("{ppath}.write_fraction"),
                        "must lie in [0, 1]",
                    ));
                }
            }
            Workload::Victim(presets)
        }
        GuestKind::ContentionEngine => {
            let sweep: ContentionSweep = from_value(doc.workload, &wpath)?;
            validate_sweep(&wpath, &sweep, cpus.len())?;
            Workload::Contention(sweep)
        }
    };
    Ok(GuestSpec {
        name: doc.name,
        kind: doc.kind,
        cpus,
        workload,
    })
}

fn validate_sweep(path: &str, sweep: &ContentionSweep, guest_cpus: usize) -> Result<(), ConfigError> {
    let lists = [
        ("cpu_configs", sweep.cpu_configs.is_empty()),
        ("line_strides", sweep.line_strides.is_empty()),
        ("workload_sizes", sweep.workload_sizes.is_empty()),
        ("op_types", sweep.op_types.is_empty()),
    ];
    for (name, empty) in lists {
        if empty {
            return Err(ConfigError::invariant(format!("{path}.{name}"), "must not be empty"));
        }
    }
    check_distinct(&format!("{path}.cpu_configs"), &sweep.cpu_configs)?;
    check_distinct(&format!("{path}.line_strides"), &sweep.line_strides)?;
    check_distinct(&format!("{path}.workload_sizes"), &sweep.workload_sizes)?;
    check_distinct(&format!("{path}.op_types"), &sweep.op_types)?;
    for (i, &m) in sweep.cpu_configs.iter().enumerate() {
        if m == 0 || m as usize > guest_cpus {
            return Err(ConfigError::invariant(
                format!("{path}.cpu_configs[{i}]"),
                format!("CPU count {m} must lie in [1, {guest_cpus}] (the guest's CPUs)"),
            ));
        }
    }
    for (i, &l) in sweep.line_strides.iter().enumerate() {
        positive(&format!("{path}.line_strides[{i}]"), l)?;
    }
    let max_stride = sweep.line_strides.iter().copied().max().unwrap_or(1);
    for (i, &w) in sweep.workload_sizes.iter().enumerate() {
        if w < max_stride {
            return Err(ConfigError::invariant(
                format!("{path}.workload_sizes[{i}]"),
                format!("workload size {w} is smaller than stride {max_stride}"),
            ));
        }
    }
    Ok(())
}

/// Parses and validates an `experiment.json` document against an already
/// validated platform.
pub fn parse_experiment(document: &str, platform: &PlatformSpec) -> Result<ExperimentSpec, ConfigError> {
    let doc: ExperimentDoc = from_json(document, "")?;
    if doc.guests.is_empty() {
        return Err(ConfigError::invariant("guests", "at least one guest is required"));
    }
    let guests = doc
        .guests
        .into_iter()
        .enumerate()
        .map(|(i, g)| parse_guest(i, g, platform))
        .collect::<Result<Vec<_>, _>>()?;

    let mut names = BTreeMap::new();
    for (i, g) in guests.iter().enumerate() {
        if let Some(prev) = names.insert(g.name.as_str(), i) {
            return Err(ConfigError::invariant(
                format!("guests[{i}].name"),
                format!("duplicate guest name `{}` (also guests[{prev}])", g.name),
            ));
        }
    }
    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, g) in guests.iter().enumerate() {
        for &cpu in &g.cpus {
            if let Some(prev) = owner.insert(cpu, i) {
                return Err(ConfigError::invariant(
                    format!("guests[{i}].cpus"),
                    format!("overlapping CPU assignment: CPU {cpu} also belongs to guests[{prev}]"),
                ));
            }
        }
    }
    let victims = guests.iter().filter(|g| g.kind == GuestKind::VictimBenchmark).count();
    if victims == 0 {
        return Err(ConfigError::invariant("guests", "at least one victim_benchmark guest is required"));
    }
    let engines: Vec<usize> = guests
        .iter()
        .enumerate()
        .filter(|(_, g)| g.kind == GuestKind::ContentionEngine)
        .map(|(i, _)| i)
        .collect();
    if engines.len() > 1 {
        return Err(ConfigError::invariant(
            format!("guests[{}].kind", engines[1]),
            "at most one contention_engine guest is supported",
        ));
    }

    let mut coloring = doc.coloring;
    if coloring.min_colors_per_vm.is_empty() {
        coloring.min_colors_per_vm = vec![1; guests.len()];
    }
    if coloring.min_colors_per_vm.len() != guests.len() {
        return Err(ConfigError::invariant(
            "coloring.min_colors_per_vm",
            format!("expected one entry per guest ({}), got {}", guests.len(), coloring.min_colors_per_vm.len()),
        ));
    }
    if coloring.enabled {
        let sum: u64 = coloring.min_colors_per_vm.iter().map(|&c| u64::from(c)).sum();
        if sum > u64::from(platform.color_count) {
            return Err(ConfigError::invariant(
                "coloring.min_colors_per_vm",
                format!(
                    "infeasible color minimums: they sum to {sum} but the platform has {} colors",
                    platform.color_count
                ),
            ));
        }
    }

    let mbr = doc.mbr;
    if mbr.enabled {
        validate_mbr(&mbr, guests.len())?;
    }

    if doc.repetitions == 0 {
        return Err(ConfigError::invariant("repetitions", "must be positive"));
    }
    if !(doc.timeout_s.is_finite() && doc.timeout_s > 0.0) {
        return Err(ConfigError::invariant("timeout_s", "must be a positive number"));
    }
    let backend = doc
        .backend
        .parse::<BackendKind>()
        .map_err(|m| ConfigError::invariant("backend", m))?;

    Ok(ExperimentSpec {
        platform: doc.platform,
        guests,
        coloring,
        mbr,
        repetitions: doc.repetitions,
        timeout_s: doc.timeout_s,
        backend,
    })
}

fn validate_mbr(mbr: &MbrSpec, guests: usize) -> Result<(), ConfigError> {
    for (name, lists) in [("budgets", &mbr.budgets), ("periods_us", &mbr.periods_us)] {
        if lists.len() != guests {
            return Err(ConfigError::invariant(
                format!("mbr.{name}"),
                format!("expected one list per guest ({guests}), got {}", lists.len()),
            ));
        }
    }
    let mut regulated = 0;
    for g in 0..guests {
        let (b, p) = (&mbr.budgets[g], &mbr.periods_us[g]);
        if b.is_empty() != p.is_empty() {
            let field = if b.is_empty() { "budgets" } else { "periods_us" };
            return Err(ConfigError::invariant(
                format!("mbr.{field}[{g}]"),
                "budgets and periods must both be empty (unregulated) or both non-empty",
            ));
        }
        for (name, list) in [("budgets", b), ("periods_us", p)] {
            for (i, &v) in list.iter().enumerate() {
                positive(&format!("mbr.{name}[{g}][{i}]"), v)?;
            }
            check_distinct(&format!("mbr.{name}[{g}]"), list)?;
        }
        if !b.is_empty() {
            regulated += 1;
        }
    }
    if regulated == 0 {
        return Err(ConfigError::invariant("mbr.budgets", "MBR is enabled but no guest has budgets"));
    }
    Ok(())
}

/// Canonical JSON rendering of an experiment; `parse_experiment` inverts it.
pub fn emit_experiment(spec: &ExperimentSpec) -> String {
    let guests = spec
        .guests
        .iter()
        .map(|g| GuestDoc {
            name: g.name.clone(),
            kind: g.kind,
            cpus: g.cpus.clone(),
            workload: match &g.workload {
                Workload::Victim(presets) if presets.len() == 1 => {
                    serde_json::to_value(&presets[0]).expect("preset serializes")
                }
                Workload::Victim(presets) => serde_json::to_value(presets).expect("presets serialize"),
                Workload::Contention(sweep) => serde_json::to_value(sweep).expect("sweep serializes"),
            },
        })
        .collect();
    let doc = ExperimentDoc {
        platform: spec.platform.clone(),
        guests,
        coloring: spec.coloring.clone(),
        mbr: spec.mbr.clone(),
        repetitions: spec.repetitions,
        timeout_s: spec.timeout_s,
        backend: spec.backend.as_str().to_string(),
    };
    serde_json::to_string_pretty(&doc).expect("experiment serializes")
}

/// Loads an experiment and the platform it references. A relative platform
/// path is resolved against the experiment file's directory unless
/// `platform_override` is given.
pub fn load_experiment(
    path: &Path,
    platform_override: Option<&Path>,
) -> Result<(ExperimentSpec, PlatformSpec), ConfigError> {
    let text = read(path)?;
    let platform_path = match platform_override {
        Some(p) => p.to_path_buf(),
        None => {
            #[derive(Deserialize)]
            struct Head {
                platform: String,
            }
            let head: Head = from_json(&text, "")?;
            let p = Path::new(&head.platform);
            if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p.to_path_buf()
            }
        }
    };
    let platform = load_platform(&platform_path)?;
    let spec = parse_experiment(&text, &platform)?;
    Ok((spec, platform))
}

/// Parses `simparams.json`; absent optional fields take their defaults.
pub fn parse_sim_params(document: &str) -> Result<crate::sim::SimParams, ConfigError> {
    let params: crate::sim::SimParams = from_json(document, "")?;
    if params.l2_hit_cycles == 0 {
        return Err(ConfigError::invariant("l2_hit_cycles", "must be at least 1"));
    }
    if params.bus_service_cycles == 0 {
        return Err(ConfigError::invariant("bus_service_cycles", "must be at least 1"));
    }
    Ok(params)
}

pub fn load_sim_params(path: &Path) -> Result<crate::sim::SimParams, ConfigError> {
    parse_sim_params(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const ZCU104: &str = r#"{
        "name": "zcu104", "cpu_count": 4, "clock_hz": 1200000000,
        "line_bytes": 64, "page_bytes": 4096,
        "l1": {"size_bytes": 32768, "ways": 8},
        "l2": {"size_bytes": 1048576, "ways": 16},
        "color_count": 8
    }"#;

    fn victim(name: &str, cpus: &str) -> String {
        format!(
            r#"{{"name": "{name}", "kind": "victim_benchmark", "cpus": {cpus},
                "workload": {{"bench_name": "b", "working_set_bytes": 4096, "total_accesses": 10,
                              "compute_cycles_per_access": 0, "write_fraction": 0.0}}}}"#
        )
    }

    fn engine(cpus: &str) -> String {
        format!(
            r#"{{"name": "bm", "kind": "contention_engine", "cpus": {cpus},
                "workload": {{"cpu_configs": [3], "line_strides": [64],
                              "workload_sizes": [32768, 1048576], "op_types": ["read", "write"]}}}}"#
        )
    }

    fn experiment(guests: &[String], min_colors: &str) -> String {
        format!(
            r#"{{"platform": "platform.json", "guests": [{}],
                "coloring": {{"enabled": true, "min_colors_per_vm": {min_colors}}},
                "mbr": {{"enabled": false, "budgets": [], "periods_us": [], "mode": "per_guest_sweep"}},
                "repetitions": 3, "timeout_s": 5, "backend": "sim"}}"#,
            guests.join(",")
        )
    }

    #[test]
    fn zcu104_geometry() {
        let p = parse_platform(ZCU104).unwrap();
        assert_eq!(p.l2.sets, 1024);
        assert_eq!(p.l1.sets, 64);
        assert_eq!(p.hardware_colors(), 16);
        assert_eq!(p.full_mask(), 0xFF);
    }

    #[test]
    fn minimal_platform() {
        let doc = r#"{"name": "tiny", "cpu_count": 1, "clock_hz": 1000000, "line_bytes": 64,
            "page_bytes": 4096, "l1": {"size_bytes": 64, "ways": 1},
            "l2": {"size_bytes": 4096, "ways": 1}, "color_count": 1}"#;
        let p = parse_platform(doc).unwrap();
        assert_eq!(p.l2.sets, 64);
        assert_eq!(p.color_count, 1);
    }

    #[test]
    fn geometry_violation_names_invariant() {
        let doc = ZCU104.replace("1048576", "1048000");
        let err = parse_platform(&doc).unwrap_err();
        assert_eq!(err.path(), "l2.size_bytes");
        assert!(err.to_string().contains("geometry invariant"), "{err}");
    }

    #[test]
    fn schema_error_names_field() {
        let doc = ZCU104.replace("\"ways\": 16", "\"ways\": \"x\"");
        let err = parse_platform(&doc).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        assert_eq!(err.path(), "l2.ways");
    }

    #[test]
    fn too_many_colors_rejected() {
        let doc = ZCU104.replace("\"color_count\": 8", "\"color_count\": 17");
        assert_eq!(parse_platform(&doc).unwrap_err().path(), "color_count");
    }

    #[test]
    fn reproduction_experiment_accepted() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("vm_linux", "[0]"), engine("[1,2,3]")], "[2,1]");
        let e = parse_experiment(&doc, &p).unwrap();
        assert_eq!(e.guests.len(), 2);
        assert_eq!(e.engine().unwrap().0, 1);
        assert_eq!(e.coloring.min_colors_per_vm, vec![2, 1]);
    }

    #[test]
    fn overlapping_cpus_rejected() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("a", "[0]"), engine("[0,1,2]")], "[1,1]");
        let err = parse_experiment(&doc, &p).unwrap_err();
        assert!(err.to_string().contains("overlapping CPU assignment"), "{err}");
        assert_eq!(err.path(), "guests[1].cpus");
    }

    #[test]
    fn infeasible_minimums_rejected() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("a", "[0]"), engine("[1,2,3]")], "[5,4]");
        let err = parse_experiment(&doc, &p).unwrap_err();
        assert!(err.to_string().contains("infeasible color minimums"), "{err}");
        assert_eq!(err.path(), "coloring.min_colors_per_vm");
    }

    #[test]
    fn unknown_backend_rejected() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("a", "[0]")], "[1]").replace("\"sim\"", "\"jtag\"");
        let err = parse_experiment(&doc, &p).unwrap_err();
        assert_eq!(err.path(), "backend");
        assert!(err.to_string().contains("unknown backend"));
    }

    #[test]
    fn workload_schema_error_is_prefixed() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("a", "[0]")], "[1]").replace("\"total_accesses\": 10", "\"total_accesses\": -1");
        let err = parse_experiment(&doc, &p).unwrap_err();
        assert!(err.path().starts_with("guests[0].workload"), "{}", err.path());
    }

    #[test]
    fn cpu_out_of_range() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = experiment(&[victim("a", "[4]")], "[1]");
        assert_eq!(parse_experiment(&doc, &p).unwrap_err().path(), "guests[0].cpus[0]");
    }

    #[test]
    fn min_colors_default_to_one() {
        let p = parse_platform(ZCU104).unwrap();
        let doc = r#"{"platform": "p.json", "guests": [
            {"name": "v", "kind": "victim_benchmark", "cpus": [0],
             "workload": [{"bench_name": "a", "working_set_bytes": 64, "total_accesses": 1,
                           "compute_cycles_per_access": 0, "write_fraction": 0.5}]}]}"#;
        let e = parse_experiment(doc, &p).unwrap();
        assert_eq!(e.coloring.min_colors_per_vm, vec![1]);
        assert_eq!(e.repetitions, DEFAULT_REPETITIONS);
        assert_eq!(e.backend, BackendKind::Sim);
    }

    #[test]
    fn emit_round_trips() {
        let p = parse_platform(ZCU104).unwrap();
        assert_eq!(parse_platform(&emit_platform(&p)).unwrap(), p);
        let doc = experiment(&[victim("vm_linux", "[0]"), engine("[1,2,3]")], "[2,1]");
        let e = parse_experiment(&doc, &p).unwrap();
        assert_eq!(parse_experiment(&emit_experiment(&e), &p).unwrap(), e);
    }
}
