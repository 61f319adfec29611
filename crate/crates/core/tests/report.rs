use std::collections::BTreeMap;

use partlab_core::orchestrator::{RunRecord, RunStatus};
use partlab_core::report::{
    AggregateStats, Format, SlowdownRow, StreamStats, baseline_match, build_report, diminishing_returns, export,
    rows_from_csv, rows_to_csv, slowdown,
};
use partlab_core::{Decimal3, Metric, MetricsSample};
use proptest::prelude::*;

fn stats(setup: &str, times: &[f64], misses: &[f64]) -> StreamStats {
    let mut metrics = BTreeMap::new();
    metrics.insert(Metric::TimeMs, AggregateStats::from_values(times).unwrap());
    if let Some(m) = AggregateStats::from_values(misses) {
        metrics.insert(Metric::LlcMiss, m);
    }
    StreamStats {
        setup: setup.into(),
        vm: "vm".into(),
        bench: "b".into(),
        metrics,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn slowdown_examples() {
    let row = slowdown(&stats("interf_write_1MiB", &[9.83], &[]), &stats("solo", &[4.37], &[])).unwrap();
    assert!(rows_to_csv(std::slice::from_ref(&row)).lines().nth(1).unwrap().contains(",2.25,"));
    assert_eq!(row.llc_miss_ratio, None, "missing counters stay blank");
    let row = slowdown(&stats("x", &[3.0], &[]), &stats("solo", &[2.0], &[])).unwrap();
    assert_eq!(row.slowdown, 1.5);
}

fn positive_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1e6, 1..8)
}

proptest! {
    #[test]
    fn slowdown_of_itself_is_one(times in positive_values(), misses in positive_values()) {
        let s = stats("x", &times, &misses);
        let row = slowdown(&s, &s).unwrap();
        prop_assert_eq!(row.slowdown, 1.0);
        prop_assert_eq!(row.llc_miss_ratio, Some(1.0));
    }

    #[test]
    fn common_scale_leaves_ratios_alone(
        setup in positive_values(),
        base in positive_values(),
        factor in 1e-3f64..1e3,
    ) {
        let plain = slowdown(&stats("x", &setup, &setup), &stats("solo", &base, &base)).unwrap();
        let scale = |v: &[f64]| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        let scaled = slowdown(
            &stats("x", &scale(&setup), &scale(&setup)),
            &stats("solo", &scale(&base), &scale(&base)),
        )
        .unwrap();
        prop_assert!(close(plain.slowdown, scaled.slowdown), "{} vs {}", plain.slowdown, scaled.slowdown);
        prop_assert!(close(plain.llc_miss_ratio.unwrap(), scaled.llc_miss_ratio.unwrap()));
    }
}

fn rows() -> impl Strategy<Value = Vec<SlowdownRow>> {
    let name = "[a-z_,\" 0-9]{1,12}";
    let ratio = prop::option::of(0.0f64..100.0);
    prop::collection::vec(
        (name, name, name, 0.0f64..100.0, ratio.clone(), ratio.clone(), ratio, 1usize..20),
        1..10,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(setup, bench, baseline, slowdown, l, b, m, n)| SlowdownRow {
                setup,
                bench,
                baseline,
                slowdown,
                llc_miss_ratio: l,
                bus_cycles_ratio: b,
                mem_access_ratio: m,
                n,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn csv_export_is_a_fixed_point(rows in rows()) {
        let first = rows_to_csv(&rows);
        let reparsed = rows_from_csv(&first).unwrap();
        prop_assert_eq!(reparsed.len(), rows.len());
        prop_assert_eq!(rows_to_csv(&reparsed), first);
    }
}

/// The first index from which every later step improves by less than
/// epsilon, scanning forward.
fn knee_oracle(series: &[(u32, f64)], epsilon: f64) -> u32 {
    for i in 0..series.len() {
        if (i..series.len() - 1).all(|j| series[j].1 - series[j + 1].1 < epsilon) {
            return series[i].0;
        }
    }
    unreachable!("the last point always qualifies")
}

fn series() -> impl Strategy<Value = Vec<(u32, f64)>> {
    prop::collection::vec((1u32..4, -0.05f64..0.4), 2..10).prop_map(|steps| {
        let (mut k, mut y) = (0u32, 3.0f64);
        let mut out = vec![(k, y)];
        for (dk, drop) in steps.into_iter().skip(1) {
            k += dk;
            y -= drop;
            out.push((k, y));
        }
        out
    })
}

#[test]
fn knee_examples() {
    assert_eq!(diminishing_returns(&[(0, 2.25), (2, 1.94), (4, 1.80), (5, 1.79)], 0.05).unwrap(), 4);
    assert_eq!(diminishing_returns(&[(2, 1.5), (4, 1.5)], 1e-9).unwrap(), 2);
    assert_eq!(diminishing_returns(&[(1, 3.0), (2, 2.0), (3, 1.0)], 0.5).unwrap(), 3);
    assert!(diminishing_returns(&[(1, 3.0)], 0.05).is_err());
    assert!(diminishing_returns(&[(2, 3.0), (1, 2.0)], 0.05).is_err());
}

proptest! {
    #[test]
    fn knee_matches_forward_scan(s in series(), epsilon in 0.01f64..0.3) {
        prop_assert_eq!(diminishing_returns(&s, epsilon).unwrap(), knee_oracle(&s, epsilon));
    }

    #[test]
    fn flat_tail_does_not_move_the_knee(
        s in series(),
        tail in prop::collection::vec((1u32..4, -0.2f64..0.0499), 1..5),
    ) {
        let epsilon = 0.05;
        let knee = diminishing_returns(&s, epsilon).unwrap();
        let mut longer = s.clone();
        let (mut k, mut y) = *s.last().unwrap();
        for (dk, drop) in tail {
            k += dk;
            y -= drop;
            longer.push((k, y));
        }
        prop_assert_eq!(diminishing_returns(&longer, epsilon).unwrap(), knee);
    }
}

#[test]
fn baselines_follow_the_naming_rule() {
    let names = ["solo", "solo_cc_4", "interf_write_1MiB", "interf_write_1MiB_cc_4", "interf_read_2MiB_cc_2"];
    let m = baseline_match(names).unwrap();
    assert_eq!(m["solo"], "solo");
    assert_eq!(m["solo_cc_4"], "solo");
    assert_eq!(m["interf_write_1MiB"], "solo");
    assert_eq!(m["interf_write_1MiB_cc_4"], "solo_cc_4");
    // No colored solo for two colors: fall back to the plain solo.
    assert_eq!(m["interf_read_2MiB_cc_2"], "solo");
    assert!(baseline_match(["interf_write_1MiB"]).is_err());
}

fn record(id: u32, name: &str, time_ms: &[u64]) -> RunRecord {
    let samples = time_ms
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut s = MetricsSample::new("vm", "b", i as u32);
            s.set(Metric::TimeMs, Decimal3::from_milli(t));
            s
        })
        .collect();
    RunRecord {
        setup_id: id,
        setup_name: name.into(),
        backend: "sim".into(),
        run_id: format!("r{id}"),
        started_at_ms: 0,
        ended_at_ms: 0,
        repetitions: time_ms.len() as u32,
        status: RunStatus::Complete,
        samples,
        raw_logs: BTreeMap::new(),
        errors: Vec::new(),
        warnings: Vec::new(),
        leftovers: Vec::new(),
        unterminated: Vec::new(),
    }
}

#[test]
fn report_uses_mean_times_and_skips_failed_runs() {
    let mut failed = record(3, "interf_read_2MiB", &[9000]);
    failed.status = RunStatus::Timeout;
    let records = [
        record(0, "solo", &[4000, 4740]),
        record(1, "interf_write_1MiB", &[9830, 9830]),
        failed,
    ];
    let report = build_report(&records).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.skipped, vec!["interf_read_2MiB (timeout)".to_string()]);
    assert!(close(report.rows[1].slowdown, 9.83 / 4.37));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    export(&report, Format::Csv, &out).unwrap();
    let csv = std::fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
