use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use latmem::config::{Mode, RunConfig};
use latmem::par::Execution;
use latmem::seed;
use latmem::topology::execute;

const EXECS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let mut rng = seed::rng(n as u64);
        let a = seed::gaussian_matrix(&mut rng, n, n, 1.0);
        let b = seed::gaussian_matrix(&mut rng, n, n, 1.0);
        for (name, exec) in EXECS {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| bench.iter(|| a.matmul_with(black_box(&b), exec).unwrap()));
        }
    }
    g.finish();
}

fn mode_sweep(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.topology.n_agents = 4;
    cfg.agent.d_model = 16;
    cfg.agent.d_v = 16;
    let mut g = c.benchmark_group("mode_sweep");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(name, |bench| bench.iter(|| exec.map(&Mode::ALL, |&m| execute(black_box(&cfg), m).unwrap().turns.len())));
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..8).collect();
    let mut g = c.benchmark_group("baseline_seed_sweep");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(name, |bench| {
            bench.iter(|| exec.map(&seeds, |&s| execute(&RunConfig { seed: s, ..RunConfig::default() }, Mode::FullContent).unwrap().turns.len()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, mode_sweep, seed_sweep);
criterion_main!(benches);
