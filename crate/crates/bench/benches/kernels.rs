use ccl_bench::{agent_inputs, batch, desk_model, one_epoch};
use ccl_core::ccl::{ccl_grad, CclConfig};
use ccl_core::graph::{build_topology, uniform_mixing};
use ccl_core::sim::run_experiment;
use ccl_core::{Method, TopologyKind};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn model_passes(c: &mut Criterion) {
    let m = desk_model();
    let b = batch(32);
    let x = m.init_params(0);
    c.bench_function("features_b32", |bench| {
        bench.iter(|| m.features(black_box(&x), b.features()).unwrap())
    });
    c.bench_function("ce_loss_grad_b32", |bench| {
        bench.iter(|| m.ce_loss_grad(black_box(&x), &b).unwrap())
    });
}

fn contrastive_grad(c: &mut Criterion) {
    let m = desk_model();
    let b = batch(32);
    let (x, peers, received) = agent_inputs(&m, &b);
    let refs: Vec<&[f64]> = peers.iter().map(|p| p.as_slice()).collect();
    let cfg = CclConfig::default();
    c.bench_function("ccl_grad_b32_p2", |bench| {
        bench.iter(|| ccl_grad(&m, black_box(&x), &b, &refs, &received, &cfg).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("ring16_one_epoch");
    g.sample_size(10);
    for method in [Method::DsgdmN, Method::QgDsgdmN, Method::Ccl] {
        let cfg = one_epoch(method);
        g.bench_with_input(BenchmarkId::from_parameter(method), &cfg, |bench, cfg| {
            bench.iter(|| run_experiment(cfg, 0).unwrap())
        });
    }
    g.finish();
}

fn spectral(c: &mut Criterion) {
    let mut g = c.benchmark_group("spectral_gap");
    for (kind, n) in [
        (TopologyKind::Ring, 16),
        (TopologyKind::Ring, 32),
        (TopologyKind::Torus, 32),
        (TopologyKind::Dyck, 32),
    ] {
        let w = uniform_mixing(&build_topology(kind, n).unwrap());
        g.bench_function(format!("{kind}_{n}"), |bench| {
            bench.iter(|| w.spectral_gap().unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    model_passes,
    contrastive_grad,
    simulation,
    spectral
);
criterion_main!(benches);
