#![allow(dead_code)]

use partlab_core::config::{CacheGeom, ReplacementPolicy};
use partlab_core::genspace::{ContentionConfig, MbrAssignment, NameStyle};
use partlab_core::{GuestKind, OpType, PlatformSpec, Setup, SetupGuest, SetupWorkload, VictimPreset};

pub fn geom(size: u64, ways: u32, line: u64) -> CacheGeom {
    CacheGeom {
        size_bytes: size,
        ways,
        sets: (size / (u64::from(ways) * line)) as u32,
        policy: ReplacementPolicy::Lru,
    }
}

pub fn zcu104() -> PlatformSpec {
    PlatformSpec {
        name: "zcu104".into(),
        cpu_count: 4,
        clock_hz: 1_200_000_000,
        line_bytes: 64,
        page_bytes: 4096,
        l1: geom(32 << 10, 8, 64),
        l2: geom(1 << 20, 16, 64),
        color_count: 8,
    }
}

/// A small platform with `colors` page colors and `hw_per_color` hardware
/// colors (64 sets of 4 KiB pages each) behind every one of them.
pub fn small_platform(colors: u32, hw_per_color: u32, ways: u32) -> PlatformSpec {
    let hw = u64::from(colors * hw_per_color);
    PlatformSpec {
        name: format!("small{colors}"),
        cpu_count: 4,
        clock_hz: 1_000_000_000,
        line_bytes: 64,
        page_bytes: 4096,
        l1: geom(4096, 2, 64),
        l2: geom(hw * 4096 * u64::from(ways), ways, 64),
        color_count: colors,
    }
}

pub fn preset(name: &str, ws: u64, total: u64, compute: u64, writes: f64) -> VictimPreset {
    VictimPreset {
        bench_name: name.into(),
        working_set_bytes: ws,
        total_accesses: total,
        compute_cycles_per_access: compute,
        write_fraction: writes,
    }
}

pub fn victim(name: &str, cpu: u32, slot: usize, presets: Vec<VictimPreset>, mask: Option<u64>) -> SetupGuest {
    SetupGuest {
        name: name.into(),
        kind: GuestKind::VictimBenchmark,
        cpus: vec![cpu],
        slot,
        color_mask: mask,
        workload: SetupWorkload::Victim { presets },
    }
}

pub fn engine(cpus: Vec<u32>, slot: usize, buffer: u64, op: OpType, mask: Option<u64>) -> SetupGuest {
    SetupGuest {
        name: "bm".into(),
        kind: GuestKind::ContentionEngine,
        workload: SetupWorkload::Contention {
            config: ContentionConfig {
                cpus: cpus.len() as u32,
                stride_bytes: 64,
                buffer_bytes: buffer,
                op,
            },
        },
        cpus,
        slot,
        color_mask: mask,
    }
}

pub fn setup(name: &str, guests: Vec<SetupGuest>, mbr: Option<MbrAssignment>) -> Setup {
    let masks: Option<Vec<u64>> = guests.iter().map(|g| g.color_mask).collect();
    Setup {
        id: 0,
        name: name.into(),
        platform: "platform.json".into(),
        repetitions: 1,
        timeout_s: 60.0,
        coloring_masks: masks,
        guests,
        mbr,
        name_style: NameStyle::default(),
    }
}

use std::collections::BTreeMap;

use partlab_core::genspace::{MbrEntry, MbrGuest, Regulation};
use partlab_core::sim::{SimOutcome, TxnRecord};
use rand::Rng;
use rand::seq::SliceRandom;

/// A setup whose guests all hold pairwise-disjoint color masks: one to
/// three victims with random presets, plus a contention engine on the
/// remaining CPUs. The platform's hardware colors are a multiple of its
/// page colors, so page colors map onto disjoint LLC sets.
pub fn random_isolation_case(rng: &mut impl Rng) -> (PlatformSpec, Setup) {
    let colors = rng.gen_range(2..=8u32);
    let plat = if rng.gen_bool(0.25) && 16 % colors == 0 {
        let mut p = zcu104();
        p.color_count = colors;
        p
    } else {
        small_platform(colors, rng.gen_range(1..=2), rng.gen_range(2..=4))
    };
    let victims = rng.gen_range(1..=3usize).min(colors as usize - 1);
    let guests = victims + 1;

    // Deal every color to a guest, at least one each.
    let mut owner: Vec<usize> = (0..colors as usize).map(|c| c % guests).collect();
    owner.shuffle(rng);
    let mut masks = vec![0u64; guests];
    for (c, &g) in owner.iter().enumerate() {
        masks[g] |= 1 << c;
    }

    let mut list = Vec::new();
    for (v, &mask) in masks.iter().enumerate().take(victims) {
        let benches = rng.gen_range(1..=2);
        let presets = (0..benches)
            .map(|b| {
                let ws = rng.gen_range(1..=48u64) * 4096 - rng.gen_range(0..4096);
                preset(
                    &format!("b{b}"),
                    ws,
                    rng.gen_range(1..=20_000),
                    rng.gen_range(0..=20),
                    f64::from(rng.gen_range(0..=4u32)) / 4.0,
                )
            })
            .collect();
        list.push(victim(&format!("vm{v}"), v as u32, v, presets, Some(mask)));
    }
    let engine_cpus: Vec<u32> = (victims as u32..4).take(rng.gen_range(1..=4 - victims)).collect();
    let op = *[OpType::Read, OpType::Write, OpType::ReadWrite].choose(rng).unwrap();
    let buffer = [32u64 << 10, 256 << 10, 1 << 20, 2 << 20][rng.gen_range(0..4)];
    list.push(engine(engine_cpus, victims, buffer, op, Some(masks[victims])));
    (plat, setup("isolated", list, None))
}

/// `setup` reduced to the single guest `name`, keeping its mask.
pub fn alone(s: &Setup, name: &str) -> Setup {
    let guests = s.guests.iter().filter(|g| g.name == name).cloned().collect();
    setup(&format!("{}_{name}_alone", s.name), guests, None)
}

/// A victim hammered by a contention engine, with a random subset of the
/// guests (at least one) regulated.
pub fn random_regulated_case(rng: &mut impl Rng) -> (PlatformSpec, Setup) {
    let mut plat = zcu104();
    plat.clock_hz = [1_000_000, 50_000_000, 1_200_000_000][rng.gen_range(0..3)];
    let ws = rng.gen_range(1..=128u64) * 4096;
    let bench = preset("b", ws, rng.gen_range(100..=8_000), rng.gen_range(0..=10), 0.3);
    let engine_cpus: Vec<u32> = (1..=rng.gen_range(1..=3)).collect();
    let op = *[OpType::Read, OpType::Write, OpType::ReadWrite].choose(rng).unwrap();
    let guests = vec![
        victim("vm", 0, 0, vec![bench], None),
        engine(engine_cpus, 1, rng.gen_range(1..=4u64) << 20, op, None),
    ];
    let mut regulate = [rng.gen_bool(0.5), rng.gen_bool(0.5)];
    if !regulate.iter().any(|&r| r) {
        regulate[rng.gen_range(0..2)] = true;
    }
    let entries = guests
        .iter()
        .zip(regulate)
        .map(|(g, on)| MbrEntry {
            guest: g.name.clone(),
            regulation: on.then(|| Regulation {
                budget: rng.gen_range(1..=20),
                period_us: rng.gen_range(1..=200),
            }),
        })
        .collect();
    (plat, setup("regulated", guests, Some(MbrAssignment { entries })))
}

/// Every (cpu, window) whose completed transactions exceed the budget of
/// the guest owning that CPU. Windows are `[kP, (k+1)P)` with P the
/// period converted to cycles.
pub fn budget_violations(s: &Setup, plat: &PlatformSpec, trace: &[TxnRecord]) -> Vec<String> {
    let mut limits = BTreeMap::new();
    for g in &s.guests {
        let Some(r) = s.mbr.as_ref().and_then(|m| m.regulation_for(&g.name)) else {
            continue;
        };
        let period = (u128::from(r.period_us) * u128::from(plat.clock_hz) / 1_000_000).max(1) as u64;
        for &cpu in &g.cpus {
            limits.insert(cpu, (r.budget, period));
        }
    }
    let mut counts: BTreeMap<(u32, u64), u64> = BTreeMap::new();
    for t in trace {
        if let Some(&(_, period)) = limits.get(&t.cpu) {
            *counts.entry((t.cpu, t.done / period)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|((cpu, _), n)| *n > limits[cpu].0)
        .map(|((cpu, k), n)| format!("cpu {cpu} window {k}: {n} > {}", limits[&cpu].0))
        .collect()
}

/// Transactions of regulated CPUs in the trace.
pub fn regulated_transactions(s: &Setup, out: &SimOutcome) -> usize {
    let regulated: Vec<u32> = s
        .guests
        .iter()
        .filter(|g| s.mbr.as_ref().and_then(|m| m.regulation_for(&g.name)).is_some())
        .flat_map(|g| g.cpus.clone())
        .collect();
    out.trace.iter().filter(|t| regulated.contains(&t.cpu)).count()
}

// Brute-force oracles for the generators.

/// Every strictly increasing (n-1)-tuple over [0, s), found by scanning all
/// subsets of [0, s) and keeping those of the right size.
pub fn brute_boundaries(s: u32, n: usize) -> Vec<Vec<u32>> {
    (0u64..1 << s)
        .filter(|set| set.count_ones() as usize == n - 1)
        .map(|set| (0..s).filter(|b| set >> b & 1 == 1).collect())
        .collect()
}

/// Color c belongs to guest i when exactly i boundaries are <= c.
pub fn brute_masks(boundaries: &[u32], s: u32, n: usize) -> Vec<u64> {
    let mut masks = vec![0u64; n];
    for c in 0..s {
        let guest = boundaries.iter().filter(|&&b| b <= c).count();
        masks[guest] |= 1 << c;
    }
    masks
}

pub fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

pub fn is_contiguous(mask: u64) -> bool {
    mask == 0 || {
        let shifted = mask >> mask.trailing_zeros();
        shifted & (shifted + 1) == 0
    }
}

/// Bits [s, e) of a `width`-bit mask, set one at a time.
pub fn bitwise_mask(s: u32, e: u32, width: u32) -> u64 {
    let mut mask = 0u64;
    for bit in 0..width {
        if bit >= s && bit < e {
            mask |= 1 << bit;
        }
    }
    mask
}

/// Nested-loop enumeration of the cross product, first guest outermost.
pub fn nested_mbr(guests: &[MbrGuest]) -> Vec<Vec<(u64, u64)>> {
    let Some((first, rest)) = guests.split_first() else {
        return vec![Vec::new()];
    };
    let tails = nested_mbr(rest);
    let mut out = Vec::new();
    for &b in &first.budgets {
        for &p in &first.periods_us {
            for t in &tails {
                let mut row = vec![(b, p)];
                row.extend(t);
                out.push(row);
            }
        }
    }
    out
}

