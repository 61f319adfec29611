use std::hint::black_box;

use criterion::{Criterion, criterion_group, criterion_main};
use partlab_core::SimParams;
use partlab_core::sim::simulate_once;

fn simulate(c: &mut Criterion) {
    let plat = partlab_bench::platform();
    let params = SimParams::default();
    let mut g = c.benchmark_group("simulate_once");
    g.sample_size(10);
    for name in ["solo", "interf_write_1MiB", "interf_write_1MiB_cc_4"] {
        let setup = partlab_bench::shortened(name, 5_000);
        g.bench_function(name, |b| {
            b.iter(|| simulate_once(black_box(&setup), &plat, &params, None, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulate);
criterion_main!(benches);
