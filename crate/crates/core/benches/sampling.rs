use cloud_uzawa::instances::{kkt_saddle, six_agent_problem, SIX_AGENT_EPSILON};
use cloud_uzawa::{estimate_gamma2, Exec, SamplingOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn gamma2(c: &mut Criterion) {
    let p = six_agent_problem();
    let s = kkt_saddle();
    let mut group = c.benchmark_group("gamma2");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = SamplingOptions { n_samples: 100_000, seed: 1, clip_to_orthant: true, exec };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, o| {
            b.iter(|| estimate_gamma2(&p, &s, SIX_AGENT_EPSILON, 60.0, o).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gamma2);
criterion_main!(benches);
