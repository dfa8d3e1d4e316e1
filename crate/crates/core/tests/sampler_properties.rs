use vpmap_core::inference::{ks_statistic, run_mcmc, HyperName, McmcConfig};
use vpmap_core::model::{Dataset, Family, ModelSpec, VpModel};
use vpmap_core::priors::{GammaPcPrior, MixingPrior, PriorSpec, TauPcPrior};
use vpmap_core::{AdjacencyGraph, InteractionType};

fn flat_run(iid: bool) -> (vpmap_core::inference::PosteriorDraws, PriorSpec) {
    let graph = AdjacencyGraph::lattice(2, 3).unwrap();
    let spec = ModelSpec::new(Family::Binomial, 1, InteractionType::IV, iid, 5, graph).unwrap();
    let model = VpModel::new(spec).unwrap();
    let data = Dataset::empty(5, 6, vec![100.0; 30]).unwrap();
    let priors = PriorSpec::new(
        TauPcPrior::elicit(1.0, 0.01).unwrap(),
        MixingPrior::Pc(GammaPcPrior::elicit(0.5, 0.99).unwrap()),
    );
    let cfg = McmcConfig {
        n_iterations: 102_000,
        burn_in: 2_000,
        thin: 10,
        seed: 2024,
        ..McmcConfig::default()
    };
    (run_mcmc(&data, &model, &priors, &cfg).unwrap(), priors)
}

#[test]
fn flat_likelihood_recovers_priors() {
    let (draws, priors) = flat_run(false);
    assert_eq!(draws.n_draws(), 10_000);
    let gamma = draws.pooled(HyperName::Gamma).unwrap();
    let tau = draws.pooled(HyperName::Tau).unwrap();
    let phi = draws.pooled(HyperName::Phi).unwrap();
    let ks_gamma = ks_statistic(&gamma, |g| priors.gamma.cdf(g));
    let ks_tau = ks_statistic(&tau, |t| priors.tau.cdf(t));
    let ks_phi = ks_statistic(&phi, |p| p);
    println!("KS gamma {ks_gamma:.4} tau {ks_tau:.4} phi {ks_phi:.4}");
    assert!(ks_gamma < 0.05);
    assert!(ks_tau < 0.05);
    assert!(ks_phi < 0.05);
    assert!(draws.chains[0].max_constraint_residual < 1e-9);
}

#[test]
fn flat_likelihood_recovers_priors_with_iid() {
    let (draws, _) = flat_run(true);
    for name in [HyperName::Psi1, HyperName::Psi2] {
        let v = draws.pooled(name).unwrap();
        let ks = ks_statistic(&v, |p| p);
        println!("KS {name:?} {ks:.4}");
        assert!(ks < 0.05);
    }
}
