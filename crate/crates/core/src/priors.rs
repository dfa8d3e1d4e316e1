//! Penalized-complexity priors for the mixing parameter `gamma` and the
//! total precision `tau`, and uniform priors on the unit interval.
//!
//! The PC prior for `gamma` places a truncated exponential with rate
//! `theta` on `sqrt(gamma)`:
//!
//! ```text
//! pi(gamma) = theta exp(-theta sqrt(gamma)) / (2 sqrt(gamma) (1 - exp(-theta)))
//! F(gamma)  = (1 - exp(-theta sqrt(gamma))) / (1 - exp(-theta))
//! ```
//!
//! The PC prior for `tau` is the type-2 Gumbel with shape 1/2 and rate
//! `lambda`, i.e. an exponential on the standard deviation `tau^(-1/2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};

/// Distance from 0 or 1 below which a mixing density is not evaluated.
pub const BOUNDARY_TOL: f64 = 1e-12;

const THETA_BRACKET: (f64, f64) = (1e-8, 1e4);

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(x > BOUNDARY_TOL && x < 1.0 - BOUNDARY_TOL) {
        return Err(VpError::Domain(format!("{name} = {x} is outside (0, 1)")));
    }
    Ok(())
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(VpError::Domain(format!("probability {p} is outside [0, 1]")));
    }
    Ok(())
}

/// `P(gamma < U)` under rate `theta`, computed without cancellation.
fn gamma_tail_ratio(theta: f64, u: f64) -> f64 {
    (-(-theta * u.sqrt()).exp_m1()) / (-(-theta).exp_m1())
}

/// Solves `(1 - exp(-theta sqrt(U))) / (1 - exp(-theta)) = a` for `theta`
/// by bisection. Requires `a > sqrt(U)`.
pub fn solve_theta(u: f64, a: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) || !(a > 0.0 && a < 1.0) {
        return Err(VpError::Elicitation(format!(
            "U = {u} and a = {a} must both lie in (0, 1)"
        )));
    }
    if a <= u.sqrt() {
        return Err(VpError::Elicitation(format!(
            "P(gamma < U) = a requires a > sqrt(U); got a = {a}, sqrt(U) = {:.6}",
            u.sqrt()
        )));
    }
    let f = |theta: f64| gamma_tail_ratio(theta, u) - a;
    let (mut lo, mut hi) = THETA_BRACKET;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(VpError::Numerical(format!(
            "theta for U = {u}, a = {a} is not bracketed by [{lo:e}, {hi:e}]"
        )));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    let residual = f(theta).abs();
    if residual >= 1e-10 {
        return Err(VpError::Numerical(format!(
            "bisection for theta stopped with residual {residual:e}"
        )));
    }
    Ok(theta)
}

/// PC prior on `gamma` with base model `gamma = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPcPrior {
    theta: f64,
    elicitation: Option<(f64, f64)>,
}

impl GammaPcPrior {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(VpError::Elicitation(format!("theta must be positive, got {theta}")));
        }
        Ok(Self { theta, elicitation: None })
    }

    /// Prior with `P(gamma < U) = a`.
    pub fn elicit(u: f64, a: f64) -> Result<Self> {
        let theta = solve_theta(u, a)?;
        Ok(Self {
            theta,
            elicitation: Some((u, a)),
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn elicitation(&self) -> Option<(f64, f64)> {
        self.elicitation
    }

    pub fn log_density(&self, gamma: f64) -> Result<f64> {
        check_unit("gamma", gamma)?;
        let t = self.theta;
        Ok(t.ln() - t * gamma.sqrt() - std::f64::consts::LN_2 - 0.5 * gamma.ln() - (-(-t).exp_m1()).ln())
    }

    pub fn cdf(&self, gamma: f64) -> f64 {
        if gamma <= 0.0 {
            0.0
        } else if gamma >= 1.0 {
            1.0
        } else {
            gamma_tail_ratio(self.theta, gamma)
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        check_probability(p)?;
        let root = -(p * (-self.theta).exp_m1()).ln_1p() / self.theta;
        Ok((root * root).clamp(0.0, 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let p: f64 = rng.gen();
        self.quantile(p).expect("uniform draw lies in [0, 1)")
    }
}

/// PC prior on the precision `tau`: type-2 Gumbel with shape 1/2 and rate `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauPcPrior {
    lambda: f64,
    elicitation: Option<(f64, f64)>,
}

impl TauPcPrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(VpError::Elicitation(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { lambda, elicitation: None })
    }

    /// Prior with `P(tau^(-1/2) > U) = a`, giving `lambda = -ln(a) / U`.
    pub fn elicit(u: f64, a: f64) -> Result<Self> {
        if !(u > 0.0 && u.is_finite()) {
            return Err(VpError::Elicitation(format!("U must be positive, got {u}")));
        }
        if !(a > 0.0 && a < 1.0) {
            return Err(VpError::Elicitation(format!("a must lie in (0, 1), got {a}")));
        }
        Ok(Self {
            lambda: -a.ln() / u,
            elicitation: Some((u, a)),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn elicitation(&self) -> Option<(f64, f64)> {
        self.elicitation
    }

    pub fn log_density(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(VpError::Domain(format!("tau = {tau} must be positive")));
        }
        let l = self.lambda;
        Ok((0.5 * l).ln() - 1.5 * tau.ln() - l / tau.sqrt())
    }

    /// `P(tau <= t) = exp(-lambda t^(-1/2))`.
    pub fn cdf(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            0.0
        } else {
            (-self.lambda / tau.sqrt()).exp()
        }
    }

    /// `P(tau^(-1/2) > s) = exp(-lambda s)`.
    pub fn sd_tail(&self, sd: f64) -> f64 {
        (-self.lambda * sd).exp()
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        check_probability(p)?;
        if p == 0.0 {
            return Ok(0.0);
        }
        if p == 1.0 {
            return Ok(f64::INFINITY);
        }
        let sd = -p.ln() / self.lambda;
        Ok(1.0 / (sd * sd))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let p: f64 = rng.gen();
            if p > 0.0 {
                return self.quantile(p).expect("uniform draw lies in (0, 1)");
            }
        }
    }
}

/// Prior on a parameter in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MixingPrior {
    Uniform,
    Pc(GammaPcPrior),
}

impl MixingPrior {
    pub fn log_density(&self, x: f64) -> Result<f64> {
        match self {
            Self::Uniform => check_unit("mixing parameter", x).map(|_| 0.0),
            Self::Pc(p) => p.log_density(x),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Uniform => x.clamp(0.0, 1.0),
            Self::Pc(p) => p.cdf(x),
        }
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        match self {
            Self::Uniform => check_probability(q).map(|_| q),
            Self::Pc(p) => p.quantile(q),
        }
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a probability")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Uniform => rng.gen(),
            Self::Pc(p) => p.sample(rng),
        }
    }
}

/// Priors for every hyperparameter of the VP model. `phi`, `psi1` and `psi2`
/// are uniform on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub tau: TauPcPrior,
    pub gamma: MixingPrior,
}

impl PriorSpec {
    pub fn new(tau: TauPcPrior, gamma: MixingPrior) -> Self {
        Self { tau, gamma }
    }

    pub fn phi(&self) -> MixingPrior {
        MixingPrior::Uniform
    }

    pub fn psi(&self) -> MixingPrior {
        MixingPrior::Uniform
    }
}

impl Default for PriorSpec {
    /// `tau`: `P(sd > 1/0.31) = 0.01`; `gamma`: `P(gamma < 0.5) = 0.99`.
    fn default() -> Self {
        Self {
            tau: TauPcPrior::elicit(1.0 / 0.31, 0.01).expect("valid default"),
            gamma: MixingPrior::Pc(GammaPcPrior::elicit(0.5, 0.99).expect("valid default")),
        }
    }
}
