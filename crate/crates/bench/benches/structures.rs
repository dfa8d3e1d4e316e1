use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use vpmap_core::kld::{default_grid, VerifyConfig, DEFAULT_GAMMA0};
use vpmap_core::{build_interaction, icar_structure, rw_structure, scale_structure, AdjacencyGraph, InteractionType};

fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("scale_structure");
    for n in [10, 50, 100] {
        let rw = rw_structure(n, 2).unwrap();
        g.bench_with_input(BenchmarkId::new("rw2", n), &rw, |b, r| b.iter(|| scale_structure(black_box(r)).unwrap()));
    }
    for side in [4, 8] {
        let icar = icar_structure(&AdjacencyGraph::lattice(side, side).unwrap()).unwrap();
        g.bench_with_input(BenchmarkId::new("icar_lattice", side * side), &icar, |b, r| {
            b.iter(|| scale_structure(black_box(r)).unwrap())
        });
    }
    g.finish();
}

fn interaction(c: &mut Criterion) {
    let time = scale_structure(&rw_structure(10, 1).unwrap()).unwrap();
    let space = scale_structure(&icar_structure(&AdjacencyGraph::lattice(3, 5).unwrap()).unwrap()).unwrap();
    c.bench_function("build_interaction_iv_10x15", |b| {
        b.iter(|| build_interaction(InteractionType::IV, black_box(&time), black_box(&space)).unwrap())
    });
}

fn kld(c: &mut Criterion) {
    let grid = default_grid();
    let mut g = c.benchmark_group("distance_curve");
    g.sample_size(10);
    for kind in [InteractionType::I, InteractionType::IV] {
        let cfg = VerifyConfig::path(kind, 4, 4, 1, 0.5);
        g.bench_with_input(BenchmarkId::new("4x4", format!("{kind:?}")), &cfg, |b, cfg| {
            b.iter(|| cfg.run(DEFAULT_GAMMA0, &grid).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scaling, interaction, kld);
criterion_main!(benches);
