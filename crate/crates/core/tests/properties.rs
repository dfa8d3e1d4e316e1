use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpmap_core::inference::mcmc::{from_unconstrained, to_unconstrained};
use vpmap_core::kld::singular_gaussian_kld;
use vpmap_core::model::{classic_to_vp, vp_to_classic, Hyperparameters};
use vpmap_core::priors::GammaPcPrior;
use vpmap_core::spectral::{igmrf_logdensity, sample_igmrf, spectral};
use vpmap_core::structure::generalized_variance;
use vpmap_core::{icar_structure, rw_structure, scale_structure, AdjacencyGraph};

/// Random graph on `n` areas: a random spanning tree plus extra edges,
/// optionally split into two pieces.
fn random_graph(n: usize, extra: usize, split: bool, seed: u64) -> AdjacencyGraph {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = if split { n / 2 } else { n };
    let mut edges = Vec::new();
    for v in 1..n {
        if v == cut {
            continue;
        }
        let lo = if v >= cut { cut } else { 0 };
        edges.push((rng.gen_range(lo..v), v));
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let same_side = (a < cut) == (b < cut);
        if a != b && same_side {
            edges.push((a.min(b), a.max(b)));
        }
    }
    AdjacencyGraph::from_edges(n, &edges).unwrap()
}

fn unit() -> impl Strategy<Value = f64> {
    0.001f64..0.999
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rw_ranks(n in 4usize..31) {
        prop_assert_eq!(spectral(rw_structure(n, 1).unwrap().matrix()).unwrap().rank(), n - 1);
        prop_assert_eq!(spectral(rw_structure(n, 2).unwrap().matrix()).unwrap().rank(), n - 2);
    }

    #[test]
    fn icar_rank_counts_components(n in 4usize..31, extra in 0usize..20, split: bool, seed: u64) {
        let g = random_graph(n, extra, split, seed);
        let rank = spectral(icar_structure(&g).unwrap().matrix()).unwrap().rank();
        prop_assert_eq!(rank, n - g.components().len());
    }

    #[test]
    fn structure_spectra_are_nonnegative(n in 4usize..25, extra in 0usize..10, seed: u64) {
        for m in [rw_structure(n, 1).unwrap(), rw_structure(n, 2).unwrap(), icar_structure(&random_graph(n, extra, false, seed)).unwrap()] {
            let s = spectral(m.matrix()).unwrap();
            let max = s.eigenvalues()[0];
            prop_assert!(s.eigenvalues().iter().all(|&l| l > -1e-9 * max));
            prop_assert_eq!(m.matrix(), &m.matrix().transpose());
        }
    }

    #[test]
    fn scaled_structures_have_unit_gv(n in 4usize..31, extra in 0usize..20, seed: u64) {
        for m in [rw_structure(n, 1).unwrap(), rw_structure(n, 2).unwrap(), icar_structure(&random_graph(n, extra, false, seed)).unwrap()] {
            let gv = generalized_variance(&scale_structure(&m).unwrap()).unwrap();
            prop_assert!((gv - 1.0).abs() < 1e-10, "gv {}", gv);
        }
    }

    #[test]
    fn samples_satisfy_constraints(n in 4usize..20, seed: u64) {
        let s = scale_structure(&rw_structure(n, 2).unwrap()).unwrap().spectral().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_igmrf(&s, &mut rng);
        let scale = x.norm().max(1.0);
        prop_assert!(s.null_residual(&x) < 1e-12 * scale);
        let ones = DVector::from_element(n, 1.0).normalize();
        let trend = DVector::from_fn(n, |i, _| i as f64).normalize();
        prop_assert!(x.dot(&ones).abs() < 1e-12 * scale);
        prop_assert!(x.dot(&trend).abs() < 1e-12 * scale);
    }

    #[test]
    fn density_ignores_projected_null_component(n in 4usize..15, a in -5.0f64..5.0, seed: u64) {
        let s = scale_structure(&rw_structure(n, 1).unwrap()).unwrap().spectral().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_igmrf(&s, &mut rng);
        let shifted = x.add_scalar(a);
        let base = igmrf_logdensity(&x, &s).unwrap();
        let projected = igmrf_logdensity(&s.project_to_row_space(&shifted), &s).unwrap();
        prop_assert!((base - projected).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn kld_is_nonnegative(seed: u64, n in 2usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spd = || {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(n, n) * 0.1
        };
        let (s1, s0) = (spd(), spd());
        prop_assert!(singular_gaussian_kld(&s1, &s0).unwrap() >= 0.0);
    }

    #[test]
    fn classic_round_trip(tau in 0.01f64..100.0, g in unit(), p in unit(), p1 in unit(), p2 in unit(), iid: bool) {
        let h = if iid { Hyperparameters::with_iid(tau, g, p, p1, p2) } else { Hyperparameters::new(tau, g, p) };
        let back = classic_to_vp(&vp_to_classic(&h).unwrap()).unwrap();
        prop_assert!((back.tau / h.tau - 1.0).abs() < 1e-12);
        prop_assert!((back.gamma - h.gamma).abs() < 1e-12);
        prop_assert!((back.phi - h.phi).abs() < 1e-12);
        if iid {
            prop_assert!((back.psi1.unwrap() - p1).abs() < 1e-12);
            prop_assert!((back.psi2.unwrap() - p2).abs() < 1e-12);
        }
        let w = h.weights();
        prop_assert!((w.sum_of_squares() * tau - 1.0).abs() < 1e-14);
    }

    #[test]
    fn transform_round_trip(tau in 1e-3f64..1e3, g in unit(), p in unit(), p1 in unit(), p2 in unit()) {
        let h = Hyperparameters::with_iid(tau, g, p, p1, p2);
        let back = from_unconstrained(&to_unconstrained(&h));
        prop_assert!((back.tau / tau - 1.0).abs() < 1e-14);
        for (a, b) in [(back.gamma, g), (back.phi, p), (back.psi1.unwrap(), p1), (back.psi2.unwrap(), p2)] {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pc_quantile_inverts_cdf(u in 0.01f64..0.95, q in 0.001f64..0.999) {
        let a = (u.sqrt() + 1.0) / 2.0;
        let prior = GammaPcPrior::elicit(u, a).unwrap();
        let x = prior.quantile(q).unwrap();
        prop_assert!((prior.cdf(x) - q).abs() < 1e-10);
    }
}
