//! Elliptical slice sampling for latent blocks with a fixed Gaussian prior.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;

use crate::model::LatentPrior;

pub const MAX_SHRINKS: usize = 100;

/// Result of one elliptical slice step.
#[derive(Debug, Clone)]
pub struct EssStep {
    pub state: DVector<f64>,
    pub log_lik: f64,
    /// Number of bracket contractions before acceptance.
    pub shrinks: usize,
    /// True when the shrink limit was hit and the current state kept.
    pub stalled: bool,
}

/// One elliptical slice update of `x` (with current log-likelihood
/// `log_lik`) against the prior `prior`. The auxiliary draw comes from the
/// prior itself, so the proposal stays inside the constrained subspace.
pub fn ess_latent_update<R, F>(
    x: &DVector<f64>,
    log_lik: f64,
    prior: &LatentPrior,
    mut loglik_fn: F,
    rng: &mut R,
) -> EssStep
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> f64,
{
    let nu = prior.sample(rng);
    let threshold = log_lik + rng.gen::<f64>().ln();
    let mut angle = rng.gen::<f64>() * 2.0 * PI;
    let (mut lo, mut hi) = (angle - 2.0 * PI, angle);
    let mut shrinks = 0;
    loop {
        let proposal = x * angle.cos() + &nu * angle.sin();
        let ll = loglik_fn(&proposal);
        if ll > threshold {
            return EssStep {
                state: proposal,
                log_lik: ll,
                shrinks,
                stalled: false,
            };
        }
        if shrinks >= MAX_SHRINKS {
            log::warn!("elliptical slice hit {MAX_SHRINKS} contractions; keeping the current state");
            return EssStep {
                state: x.clone(),
                log_lik,
                shrinks,
                stalled: true,
            };
        }
        if angle < 0.0 {
            lo = angle;
        } else {
            hi = angle;
        }
        angle = lo + rng.gen::<f64>() * (hi - lo);
        shrinks += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::spectral;
    use crate::structure::{rw_structure, scale_structure};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rw1_prior(n: usize) -> (LatentPrior, nalgebra::DMatrix<f64>) {
        let r = scale_structure(&rw_structure(n, 1).unwrap()).unwrap();
        let s = spectral(r.matrix()).unwrap();
        let cov = s.pseudo_inverse();
        (LatentPrior::Dense(s), cov)
    }

    #[test]
    fn constant_likelihood_preserves_prior() {
        let (prior, cov) = rw1_prior(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = DVector::zeros(4);
        let n = 100_000;
        let mut acc = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            x = ess_latent_update(&x, 0.0, &prior, |_| 0.0, &mut rng).state;
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        for i in 0..4 {
            let rel = (acc[(i, i)] / cov[(i, i)] - 1.0).abs();
            assert!(rel < 0.05, "variance {i}: {} vs {}", acc[(i, i)], cov[(i, i)]);
        }
        let max = cov.amax();
        assert!((&acc - &cov).amax() < 0.05 * max);
    }

    #[test]
    fn stays_in_subspace() {
        let (prior, _) = rw1_prior(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0, -0.5, 0.0]);
        let ll = |v: &DVector<f64>| -0.5 * (v - &target).norm_squared();
        let mut x = DVector::zeros(6);
        let mut cur = ll(&x);
        for _ in 0..10_000 {
            let step = ess_latent_update(&x, cur, &prior, ll, &mut rng);
            x = step.state;
            cur = step.log_lik;
        }
        assert!(x.sum().abs() < 1e-10);
        assert!(prior.null_residual(&x) < 1e-10);
    }

    #[test]
    fn concentrates_at_peaked_likelihood() {
        let (prior, _) = rw1_prior(5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // a feasible point (sums to zero)
        let target = DVector::from_vec(vec![0.8, -0.3, 0.1, -0.4, -0.2]);
        let prec = 1e4;
        let ll = |v: &DVector<f64>| -0.5 * prec * (v - &target).norm_squared();
        let mut x = DVector::zeros(5);
        let mut cur = ll(&x);
        let mut mean = DVector::zeros(5);
        let (burn, n) = (2_000, 4_000);
        for it in 0..burn + n {
            let step = ess_latent_update(&x, cur, &prior, ll, &mut rng);
            x = step.state;
            cur = step.log_lik;
            if it >= burn {
                mean += &x;
            }
        }
        mean /= n as f64;
        // the posterior mode: prior precision is negligible next to 1e4 I
        assert!((mean - target).amax() < 0.01);
    }
}
