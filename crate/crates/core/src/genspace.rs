//! Experiment-space enumeration.
//!
//! Three generators feed the manifest: contention-engine variants (the
//! product of CPU counts, strides, buffer sizes and operation types),
//! cache-coloring assignments (contiguous, non-overlapping color ranges cut
//! at strictly increasing boundaries) and bandwidth-regulation assignments
//! (budget x period per regulated guest). [`enumerate_setups`] crosses them
//! into uniquely named [`Setup`]s.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ContentionSweep, ExperimentSpec, GuestKind, MbrMode, OpType, PlatformSpec, VictimPreset,
    Workload,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("partition bounds out of range: need 0 <= {start} <= {end} <= {colors}")]
    MaskRange { start: u32, end: u32, colors: u32 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty product: {0}")]
    EmptyProduct(String),
}

/// One contention-engine variant: `cpus` CPUs sweeping a `buffer_bytes`
/// buffer with stride `stride_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentionConfig {
    pub cpus: u32,
    pub stride_bytes: u64,
    pub buffer_bytes: u64,
    pub op: OpType,
}

/// Cartesian product of the sweep lists, ordered by CPU count, then stride,
/// then buffer size, then operation (each in list order).
pub fn gen_guest_configs(sweep: &ContentionSweep) -> Vec<ContentionConfig> {
    let mut out = Vec::with_capacity(
        sweep.cpu_configs.len() * sweep.line_strides.len() * sweep.workload_sizes.len() * sweep.op_types.len(),
    );
    for &cpus in &sweep.cpu_configs {
        for &stride_bytes in &sweep.line_strides {
            for &buffer_bytes in &sweep.workload_sizes {
                for &op in &sweep.op_types {
                    out.push(ContentionConfig {
                        cpus,
                        stride_bytes,
                        buffer_bytes,
                        op,
                    });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cache coloring
// ---------------------------------------------------------------------------

/// Mask with bits `[start, end)` set: `((1 << (end - start)) - 1) << start`.
pub fn mask_for_partition(start: u32, end: u32, colors: u32) -> Result<u64, GenError> {
    if start > end || end > colors || colors > 64 {
        return Err(GenError::MaskRange { start, end, colors });
    }
    let width = end - start;
    let ones = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    Ok(ones << start.min(63))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColoringAssignment {
    /// One mask per guest, in guest order.
    pub masks: Vec<u64>,
    /// The boundary tuple the masks were cut from.
    pub boundaries: Vec<u32>,
}

impl ColoringAssignment {
    pub fn colors_of(&self, guest: usize) -> u32 {
        self.masks[guest].count_ones()
    }
}

/// Strictly increasing `k`-tuples over `[0, n)` in lexicographic order.
struct BoundaryTuples {
    n: u32,
    next: Option<Vec<u32>>,
}

impl BoundaryTuples {
    fn new(n: u32, k: usize) -> Self {
        let next = if k as u64 <= u64::from(n) {
            Some((0..k as u32).collect())
        } else {
            None
        };
        BoundaryTuples { n, next }
    }
}

impl Iterator for BoundaryTuples {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let current = self.next.take()?;
        let k = current.len();
        let mut succ = current.clone();
        // Rightmost position that can still move up.
        let pos = (0..k).rev().find(|&i| succ[i] < self.n - (k - i) as u32);
        if let Some(i) = pos {
            succ[i] += 1;
            for j in i + 1..k {
                succ[j] = succ[j - 1] + 1;
            }
            self.next = Some(succ);
        }
        Some(current)
    }
}

/// Cuts `[0, colors)` at the given boundaries into one mask per guest.
pub fn masks_from_boundaries(boundaries: &[u32], colors: u32) -> Result<Vec<u64>, GenError> {
    let mut masks = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &end in boundaries.iter().chain([&colors]) {
        masks.push(mask_for_partition(start, end, colors)?);
        start = end;
    }
    Ok(masks)
}

/// All coloring assignments for `guests` VMs over `colors` colors whose
/// per-guest color counts meet `min_colors`.
pub fn gen_colorings(colors: u32, guests: usize, min_colors: &[u32]) -> Result<Vec<ColoringAssignment>, GenError> {
    if guests == 0 {
        return Err(GenError::Precondition("at least one guest is required".into()));
    }
    if colors == 0 || colors > 64 {
        return Err(GenError::Precondition(format!("color count {colors} outside [1, 64]")));
    }
    if min_colors.len() != guests {
        return Err(GenError::Precondition(format!(
            "expected {guests} color minimums, got {}",
            min_colors.len()
        )));
    }
    let demanded: u64 = min_colors.iter().map(|&c| u64::from(c)).sum();
    if demanded > u64::from(colors) {
        return Err(GenError::Precondition(format!(
            "color minimums sum to {demanded} but only {colors} colors exist"
        )));
    }

    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut unique = Vec::new();
    for boundaries in BoundaryTuples::new(colors, guests - 1) {
        let masks = masks_from_boundaries(&boundaries, colors)?;
        if seen.insert(masks.clone()) {
            unique.push(ColoringAssignment { masks, boundaries });
        }
    }
    Ok(unique
        .into_iter()
        .filter(|a| a.masks.iter().zip(min_colors).all(|(m, &min)| m.count_ones() >= min))
        .collect())
}

// ---------------------------------------------------------------------------
// Memory bandwidth regulation
// ---------------------------------------------------------------------------

/// Budget in memory transactions per period; period in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regulation {
    pub budget: u64,
    pub period_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MbrEntry {
    pub guest: String,
    /// `None` leaves the guest unregulated.
    pub regulation: Option<Regulation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MbrAssignment {
    pub entries: Vec<MbrEntry>,
}

impl MbrAssignment {
    pub fn regulation_for(&self, guest: &str) -> Option<Regulation> {
        self.entries
            .iter()
            .find(|e| e.guest == guest)
            .and_then(|e| e.regulation)
    }
}

/// A guest eligible for regulation together with its candidate lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MbrGuest {
    pub name: String,
    pub budgets: Vec<u64>,
    pub periods_us: Vec<u64>,
}

pub fn gen_mbr(guests: &[MbrGuest], mode: MbrMode) -> Result<Vec<MbrAssignment>, GenError> {
    for g in guests {
        if g.budgets.is_empty() || g.periods_us.is_empty() {
            return Err(GenError::Precondition(format!(
                "guest `{}` needs non-empty budget and period lists",
                g.name
            )));
        }
    }
    let per_guest: Vec<Vec<Regulation>> = guests
        .iter()
        .map(|g| {
            g.budgets
                .iter()
                .flat_map(|&budget| g.periods_us.iter().map(move |&period_us| Regulation { budget, period_us }))
                .collect()
        })
        .collect();
    let unregulated = || -> Vec<MbrEntry> {
        guests
            .iter()
            .map(|g| MbrEntry {
                guest: g.name.clone(),
                regulation: None,
            })
            .collect()
    };

    let mut out = Vec::new();
    match mode {
        MbrMode::PerGuestSweep => {
            for (gi, options) in per_guest.iter().enumerate() {
                for &reg in options {
                    let mut entries = unregulated();
                    entries[gi].regulation = Some(reg);
                    out.push(MbrAssignment { entries });
                }
            }
        }
        MbrMode::CrossProduct => {
            if guests.is_empty() {
                return Ok(out);
            }
            // Odometer over the per-guest option lists, first guest slowest.
            let mut idx = vec![0usize; guests.len()];
            loop {
                let entries = guests
                    .iter()
                    .zip(&idx)
                    .enumerate()
                    .map(|(gi, (g, &i))| MbrEntry {
                        guest: g.name.clone(),
                        regulation: Some(per_guest[gi][i]),
                    })
                    .collect();
                out.push(MbrAssignment { entries });
                let mut pos = guests.len();
                loop {
                    if pos == 0 {
                        return Ok(out);
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < per_guest[pos].len() {
                        break;
                    }
                    idx[pos] = 0;
                }
            }
        }
    }
    Ok(out)
}

/// Converts a bandwidth in bytes/s to a per-period transaction budget,
/// rounding down.
pub fn budget_from_bandwidth(bytes_per_s: u64, period_us: u64, line_bytes: u64) -> u64 {
    let bytes = u128::from(bytes_per_s) * u128::from(period_us) / 1_000_000;
    (bytes / u128::from(line_bytes.max(1))) as u64
}

// ---------------------------------------------------------------------------
// Setups and names
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SetupWorkload {
    Victim { presets: Vec<VictimPreset> },
    Contention { config: ContentionConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupGuest {
    pub name: String,
    pub kind: GuestKind,
    pub cpus: Vec<u32>,
    /// Position of the guest in the experiment's guest list.
    pub slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_mask: Option<u64>,
    pub workload: SetupWorkload,
}

impl SetupGuest {
    pub fn presets(&self) -> &[VictimPreset] {
        match &self.workload {
            SetupWorkload::Victim { presets } => presets,
            SetupWorkload::Contention { .. } => &[],
        }
    }

    pub fn contention(&self) -> Option<&ContentionConfig> {
        match &self.workload {
            SetupWorkload::Contention { config } => Some(config),
            SetupWorkload::Victim { .. } => None,
        }
    }
}

/// Which optional sweep dimensions appear in names (only those the sweep
/// actually varies).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameStyle {
    #[serde(default)]
    pub cpus: bool,
    #[serde(default)]
    pub stride: bool,
}

impl NameStyle {
    fn is_plain(&self) -> bool {
        !self.cpus && !self.stride
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub id: u32,
    pub name: String,
    /// Platform document reference.
    pub platform: String,
    pub repetitions: u32,
    pub timeout_s: f64,
    pub guests: Vec<SetupGuest>,
    /// Full coloring assignment, indexed by guest slot.
    pub coloring_masks: Option<Vec<u64>>,
    pub mbr: Option<MbrAssignment>,
    #[serde(default, skip_serializing_if = "NameStyle::is_plain")]
    pub name_style: NameStyle,
}

impl Setup {
    pub fn engine(&self) -> Option<&SetupGuest> {
        self.guests.iter().find(|g| g.kind == GuestKind::ContentionEngine)
    }

    pub fn victims(&self) -> impl Iterator<Item = &SetupGuest> {
        self.guests.iter().filter(|g| g.kind == GuestKind::VictimBenchmark)
    }

    /// Every (vm, bench) pair the setup is expected to report.
    pub fn expected_streams(&self) -> BTreeSet<(String, String)> {
        self.victims()
            .flat_map(|g| g.presets().iter().map(move |p| (g.name.clone(), p.bench_name.clone())))
            .collect()
    }

    pub fn is_baseline(&self) -> bool {
        self.engine().is_none()
    }
}

/// Parsed components of a setup name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SetupNameParts {
    /// `None` for the `solo` baselines.
    pub access: Option<OpType>,
    pub buffer_bytes: Option<u64>,
    pub cpus: Option<u32>,
    pub stride_bytes: Option<u64>,
    /// Victim color count, or every guest's count when more than two guests
    /// are colored.
    pub colors: Option<Vec<u32>>,
    /// One entry per regulation-eligible guest: `(budget, period_us)` or
    /// `None` when that guest is left unregulated.
    pub mbr: Vec<Option<(u64, u64)>>,
}

impl fmt::Display for SetupNameParts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.access, self.buffer_bytes) {
            (Some(access), Some(size)) => {
                write!(f, "interf_{}_{}", access.name_token(), render_size(size))?;
                if let Some(m) = self.cpus {
                    write!(f, "_cpus{m}")?;
                }
                if let Some(l) = self.stride_bytes {
                    write!(f, "_stride{}", render_size(l))?;
                }
            }
            _ => f.write_str("solo")?,
        }
        if let Some(colors) = &self.colors {
            let joined: Vec<String> = colors.iter().map(u32::to_string).collect();
            write!(f, "_cc_{}", joined.join("-"))?;
        }
        for entry in &self.mbr {
            match entry {
                Some((b, p)) => write!(f, "_mbr_{b}_{p}us")?,
                None => f.write_str("_mbr_off")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed setup name `{name}`: {reason}")]
pub struct NameError {
    pub name: String,
    pub reason: String,
}

/// Parses a canonical setup name back into its components.
pub fn parse_setup_name(name: &str) -> Result<SetupNameParts, NameError> {
    let fail = |reason: &str| NameError {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let tokens: Vec<&str> = name.split('_').collect();
    let mut parts = SetupNameParts::default();
    let mut i = match tokens.first() {
        Some(&"solo") => 1,
        Some(&"interf") => {
            let access = tokens
                .get(1)
                .and_then(|t| OpType::from_name_token(t))
                .ok_or_else(|| fail("unknown access type"))?;
            let size = tokens
                .get(2)
                .and_then(|t| parse_size(t))
                .ok_or_else(|| fail("bad buffer size"))?;
            parts.access = Some(access);
            parts.buffer_bytes = Some(size);
            let mut i = 3;
            if let Some(m) = tokens.get(i).and_then(|t| t.strip_prefix("cpus")) {
                parts.cpus = Some(m.parse().map_err(|_| fail("bad CPU count"))?);
                i += 1;
            }
            if let Some(l) = tokens.get(i).and_then(|t| t.strip_prefix("stride")) {
                parts.stride_bytes = Some(parse_size(l).ok_or_else(|| fail("bad stride"))?);
                i += 1;
            }
            i
        }
        _ => return Err(fail("must start with `solo` or `interf`")),
    };
    if tokens.get(i) == Some(&"cc") {
        let list = tokens.get(i + 1).ok_or_else(|| fail("missing color count"))?;
        let colors = list
            .split('-')
            .map(|c| c.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| fail("bad color count"))?;
        parts.colors = Some(colors);
        i += 2;
    }
    while i < tokens.len() {
        if tokens[i] != "mbr" {
            return Err(fail("unexpected token"));
        }
        match tokens.get(i + 1) {
            Some(&"off") => {
                parts.mbr.push(None);
                i += 2;
            }
            Some(b) => {
                let budget = b.parse().map_err(|_| fail("bad budget"))?;
                let period = tokens
                    .get(i + 2)
                    .and_then(|p| p.strip_suffix("us"))
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| fail("bad period"))?;
                parts.mbr.push(Some((budget, period)));
                i += 3;
            }
            None => return Err(fail("dangling mbr token")),
        }
    }
    if parts.to_string() != name {
        return Err(fail("not in canonical form"));
    }
    Ok(parts)
}

/// Components of a setup's canonical name, derived from its contents.
pub fn setup_name_parts(setup: &Setup) -> SetupNameParts {
    let mut parts = SetupNameParts::default();
    if let Some(cfg) = setup.engine().and_then(SetupGuest::contention) {
        parts.access = Some(cfg.op);
        parts.buffer_bytes = Some(cfg.buffer_bytes);
        if setup.name_style.cpus {
            parts.cpus = Some(cfg.cpus);
        }
        if setup.name_style.stride {
            parts.stride_bytes = Some(cfg.stride_bytes);
        }
    }
    if let Some(masks) = &setup.coloring_masks {
        let counts: Vec<u32> = masks.iter().map(|m| m.count_ones()).collect();
        parts.colors = Some(if counts.len() <= 2 {
            let victim_slot = setup.victims().next().map(|g| g.slot).unwrap_or(0);
            vec![counts.get(victim_slot).copied().unwrap_or(0)]
        } else {
            counts
        });
    }
    if let Some(mbr) = &setup.mbr {
        parts.mbr = mbr
            .entries
            .iter()
            .map(|e| e.regulation.map(|r| (r.budget, r.period_us)))
            .collect();
    }
    parts
}

/// Canonical name: `solo` or `interf_<access>_<buffer_size>`, then
/// `_cc_<k>` under coloring and `_mbr_<budget>_<period>us` per regulated
/// guest.
pub fn setup_name(setup: &Setup) -> String {
    setup_name_parts(setup).to_string()
}

const UNITS: [(&str, u64); 3] = [("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)];

/// Binary-unit size rendering: `32KiB`, `1MiB`, `1.5MiB`, `100B`. The
/// fraction is exact (power-of-two units always give a finite decimal).
pub fn render_size(bytes: u64) -> String {
    let Some(&(suffix, unit)) = UNITS.iter().find(|(_, u)| bytes >= *u) else {
        return format!("{bytes}B");
    };
    let mut out = (bytes / unit).to_string();
    let mut rem = u128::from(bytes % unit);
    if rem != 0 {
        out.push('.');
        while rem != 0 {
            rem *= 10;
            out.push(char::from(b'0' + (rem / u128::from(unit)) as u8));
            rem %= u128::from(unit);
        }
    }
    out.push_str(suffix);
    out
}

pub fn parse_size(text: &str) -> Option<u64> {
    let (number, unit) = UNITS
        .iter()
        .find_map(|&(s, u)| text.strip_suffix(s).map(|n| (n, u)))
        .or_else(|| text.strip_suffix('B').map(|n| (n, 1)))?;
    let (int, frac) = number.split_once('.').unwrap_or((number, ""));
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac.len() > 30 {
        return None;
    }
    let int: u128 = int.parse().ok()?;
    // frac / 10^n * unit with unit a power of two: split 10^n = 5^n * 2^n
    // so the intermediate stays small.
    let n = frac.len() as u32;
    let frac_num: u128 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    let fives = 5u128.pow(n);
    if !frac_num.is_multiple_of(fives) {
        return None;
    }
    let scaled = (frac_num / fives) * u128::from(unit);
    let twos = 1u128 << n;
    if !scaled.is_multiple_of(twos) {
        return None;
    }
    u64::try_from(int.checked_mul(u128::from(unit))? + scaled / twos).ok()
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub platform: String,
    pub color_count: u32,
    pub guests: Vec<String>,
    pub contention_configs: usize,
    pub coloring_enabled: bool,
    pub min_colors_per_vm: Vec<u32>,
    pub coloring_assignments: usize,
    pub mbr_enabled: bool,
    pub mbr_mode: MbrMode,
    pub mbr_assignments: usize,
    pub baselines: usize,
    pub interference_setups: usize,
    pub total: usize,
    pub repetitions: u32,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub setups: Vec<Setup>,
}

/// Crosses contention configs x coloring variants x regulation variants
/// into named setups, preceded by the `solo` baseline and one `solo_cc_<k>`
/// baseline per coloring assignment. When a mechanism is enabled its
/// variant list is "off" followed by every generated assignment.
pub fn enumerate_setups(exp: &ExperimentSpec, plat: &PlatformSpec) -> Result<Manifest, GenError> {
    let n = exp.guests.len();
    let engine = exp.engine();
    let configs = match engine {
        Some((_, g)) => match &g.workload {
            Workload::Contention(sweep) => gen_guest_configs(sweep),
            Workload::Victim(_) => Vec::new(),
        },
        None => Vec::new(),
    };
    let name_style = match engine.map(|(_, g)| &g.workload) {
        Some(Workload::Contention(sweep)) => NameStyle {
            cpus: sweep.cpu_configs.len() > 1,
            stride: sweep.line_strides.len() > 1,
        },
        _ => NameStyle::default(),
    };

    let colorings = if exp.coloring.enabled {
        let c = gen_colorings(plat.color_count, n, &exp.coloring.min_colors_per_vm)?;
        if c.is_empty() {
            return Err(GenError::EmptyProduct(
                "coloring is enabled but no assignment satisfies the color minimums".into(),
            ));
        }
        c
    } else {
        Vec::new()
    };

    let mbr_assignments = if exp.mbr.enabled {
        let guests: Vec<MbrGuest> = exp
            .guests
            .iter()
            .enumerate()
            .filter(|(i, _)| !exp.mbr.budgets.get(*i).is_none_or(Vec::is_empty))
            .map(|(i, g)| MbrGuest {
                name: g.name.clone(),
                budgets: exp.mbr.budgets[i].clone(),
                periods_us: exp.mbr.periods_us.get(i).cloned().unwrap_or_default(),
            })
            .collect();
        let a = gen_mbr(&guests, exp.mbr.mode)?;
        if a.is_empty() {
            return Err(GenError::EmptyProduct("MBR is enabled but no assignment was generated".into()));
        }
        a
    } else {
        Vec::new()
    };

    let victim_guests = |masks: Option<&Vec<u64>>| -> Vec<SetupGuest> {
        exp.victims()
            .map(|(slot, g)| SetupGuest {
                name: g.name.clone(),
                kind: g.kind,
                cpus: g.cpus.clone(),
                slot,
                color_mask: masks.map(|m| m[slot]),
                workload: SetupWorkload::Victim {
                    presets: match &g.workload {
                        Workload::Victim(p) => p.clone(),
                        Workload::Contention(_) => Vec::new(),
                    },
                },
            })
            .collect()
    };

    let mut setups = Vec::new();
    let mut push = |guests: Vec<SetupGuest>, coloring: Option<&ColoringAssignment>, mbr: Option<&MbrAssignment>| {
        let mut setup = Setup {
            id: setups.len() as u32,
            name: String::new(),
            platform: exp.platform.clone(),
            repetitions: exp.repetitions,
            timeout_s: exp.timeout_s,
            guests,
            coloring_masks: coloring.map(|c| c.masks.clone()),
            mbr: mbr.cloned(),
            name_style,
        };
        setup.name = setup_name(&setup);
        setups.push(setup);
    };

    push(victim_guests(None), None, None);
    for c in &colorings {
        push(victim_guests(Some(&c.masks)), Some(c), None);
    }
    let baselines = 1 + colorings.len();

    let coloring_variants: Vec<Option<&ColoringAssignment>> =
        std::iter::once(None).chain(colorings.iter().map(Some)).collect();
    let mbr_variants: Vec<Option<&MbrAssignment>> =
        std::iter::once(None).chain(mbr_assignments.iter().map(Some)).collect();

    if let Some((slot, g)) = engine {
        for cfg in &configs {
            for &coloring in &coloring_variants {
                for &mbr in &mbr_variants {
                    let mut guests = victim_guests(coloring.map(|c| &c.masks));
                    guests.push(SetupGuest {
                        name: g.name.clone(),
                        kind: g.kind,
                        cpus: g.cpus.clone(),
                        slot,
                        color_mask: coloring.map(|c| c.masks[slot]),
                        workload: SetupWorkload::Contention { config: *cfg },
                    });
                    guests.sort_by_key(|g| g.slot);
                    push(guests, coloring, mbr);
                }
            }
        }
    }

    let mut names = HashSet::new();
    for s in &setups {
        if !names.insert(s.name.as_str()) {
            return Err(GenError::Precondition(format!("setup name `{}` is not unique", s.name)));
        }
    }

    let total = setups.len();
    Ok(Manifest {
        meta: ManifestMeta {
            platform: exp.platform.clone(),
            color_count: plat.color_count,
            guests: exp.guests.iter().map(|g| g.name.clone()).collect(),
            contention_configs: configs.len(),
            coloring_enabled: exp.coloring.enabled,
            min_colors_per_vm: exp.coloring.min_colors_per_vm.clone(),
            coloring_assignments: colorings.len(),
            mbr_enabled: exp.mbr.enabled,
            mbr_mode: exp.mbr.mode,
            mbr_assignments: mbr_assignments.len(),
            baselines,
            interference_setups: total - baselines,
            total,
            repetitions: exp.repetitions,
            timeout_s: exp.timeout_s,
        },
        setups,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn setup_file_name(id: u32) -> String {
    format!("setup_{id}.json")
}

/// Serialized manifest bytes (stable across runs).
pub fn manifest_json(manifest: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

/// Writes `manifest.json` and one `setup_<id>.json` per setup.
pub fn write_manifest(manifest: &Manifest, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json(manifest))?;
    for setup in &manifest.setups {
        let mut s = serde_json::to_string_pretty(setup).expect("setup serializes");
        s.push('\n');
        fs::write(dir.join(setup_file_name(setup.id)), s)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn read_setup(dir: &Path, id: u32) -> io::Result<Setup> {
    let text = fs::read_to_string(dir.join(setup_file_name(id)))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
