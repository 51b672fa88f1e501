use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reverse_rl::harness::random_features;
use reverse_rl::mdp::{build_microdrone, build_random_lattice_mdp, build_random_mdp, MicrodroneRewards};
use reverse_rl::oracle::{distributional_fixed_point, linear_fixed_point, reverse_gvf};

fn closed_forms(c: &mut Criterion) {
    let mut g = c.benchmark_group("reverse_gvf");
    for n in [4usize, 10, 50] {
        let (mdp, pi) = build_random_mdp(7, n, 3, 2).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| reverse_gvf(&mdp, &pi).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("linear_fixed_point");
    for n in [10usize, 50] {
        let (mdp, pi) = build_random_mdp(8, n, 3, 2).unwrap();
        let x = random_features(n, n / 2, 1).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| linear_fixed_point(&mdp, &pi, &x).unwrap())
        });
    }
    g.finish();
}

fn distributional(c: &mut Criterion) {
    let mut g = c.benchmark_group("distributional_fixed_point");
    g.sample_size(10);
    let (drone, pi) = build_microdrone(MicrodroneRewards::Energy);
    g.bench_function("microdrone", |b| b.iter(|| distributional_fixed_point(&drone, &pi, 1e-8).unwrap()));
    let (mdp, pi) = build_random_lattice_mdp(3, 6, 2, 2).unwrap();
    g.bench_function("lattice_6", |b| b.iter(|| distributional_fixed_point(&mdp, &pi, 1e-8).unwrap()));
    g.finish();
}

criterion_group!(benches, closed_forms, distributional);
criterion_main!(benches);
