use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpmap_bench::{flat_rate_data, lattice_model};
use vpmap_core::inference::{ess_latent_update, run_mcmc, McmcConfig};
use vpmap_core::model::CellLikelihood;
use vpmap_core::priors::PriorSpec;

fn ess_step(c: &mut Criterion) {
    let model = lattice_model(3, 5, 10);
    let data = flat_rate_data(&model);
    let lik = CellLikelihood::new(&data, model.spec().family).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = model.delta_prior().sample(&mut rng);
    let eta_of = |d: &DVector<f64>| d.iter().map(|v| -3.9 + 0.1 * v).collect::<Vec<f64>>();
    let mut ll = lik.log_likelihood(&eta_of(&x));
    c.bench_function("ess_interaction_block_150", |b| {
        b.iter(|| {
            let step = ess_latent_update(&x, ll, model.delta_prior(), |d| lik.log_likelihood(&eta_of(d)), &mut rng);
            x = step.state;
            ll = step.log_lik;
        })
    });
}

fn iterations(c: &mut Criterion) {
    let model = lattice_model(3, 5, 10);
    let data = flat_rate_data(&model);
    let priors = PriorSpec::default();
    let cfg = McmcConfig {
        n_iterations: 500,
        burn_in: 100,
        thin: 10,
        n_chains: 1,
        seed: 3,
        ..McmcConfig::default()
    };
    let mut g = c.benchmark_group("run_mcmc");
    g.sample_size(10);
    g.bench_function("500_iterations_10x15", |b| b.iter(|| run_mcmc(&data, &model, &priors, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, ess_step, iterations);
criterion_main!(benches);
