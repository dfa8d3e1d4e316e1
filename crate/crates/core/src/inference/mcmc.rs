//! MCMC for the VP model.
//!
//! Every iteration runs, in order: an elliptical slice step per latent
//! block, random-walk updates of the intercepts, a joint random-walk update
//! of the transformed hyperparameters with the latent blocks held fixed, and
//! a second joint update that rescales the latent blocks so that every
//! block's contribution to the predictor is unchanged. The second move keeps
//! the likelihood fixed and lets the hyperparameters move freely when the
//! data pin down the predictor.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};
use crate::model::{softplus, BlockWeights, CellLikelihood, Dataset, Family, Hyperparameters, LatentField, LatentPrior, VpModel};
use crate::priors::{MixingPrior, PriorSpec, TauPcPrior};

use super::ess::ess_latent_update;

/// Standard deviation of the Gaussian prior on each intercept.
pub const INTERCEPT_SD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Iterations between updates of the proposal shapes during burn-in.
    #[serde(default = "default_window")]
    pub adapt_window: usize,
    /// Target acceptance of the joint hyperparameter moves.
    #[serde(default = "default_joint_target")]
    pub target_acceptance: f64,
    /// Target acceptance of the scalar intercept moves.
    #[serde(default = "default_scalar_target")]
    pub scalar_target_acceptance: f64,
    /// Keep a latent snapshot every this many retained draws (0 = none).
    #[serde(default)]
    pub latent_thin: usize,
    /// Worker threads for independent chains.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_window() -> usize {
    100
}

fn default_joint_target() -> f64 {
    0.25
}

fn default_scalar_target() -> f64 {
    0.44
}

fn default_jobs() -> usize {
    1
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iterations: 20_000,
            burn_in: 5_000,
            thin: 10,
            n_chains: 1,
            seed: 1,
            adapt_window: default_window(),
            target_acceptance: default_joint_target(),
            scalar_target_acceptance: default_scalar_target(),
            latent_thin: 0,
            jobs: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VpError::Validation(m.to_string()));
        if self.n_iterations == 0 {
            return bad("n_iterations must be positive");
        }
        if self.burn_in >= self.n_iterations {
            return bad("burn_in must be smaller than n_iterations");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.adapt_window == 0 {
            return bad("adapt_window must be at least 1");
        }
        for t in [self.target_acceptance, self.scalar_target_acceptance] {
            if !(t > 0.0 && t < 1.0) {
                return bad("target acceptance rates must lie in (0, 1)");
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        (self.n_iterations - self.burn_in).div_ceil(self.thin)
    }
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(log tau, logit gamma, logit phi[, logit psi1, logit psi2])`.
pub fn to_unconstrained(h: &Hyperparameters) -> Vec<f64> {
    let mut u = vec![h.tau.ln(), logit(h.gamma), logit(h.phi)];
    if let (Some(p1), Some(p2)) = (h.psi1, h.psi2) {
        u.push(logit(p1));
        u.push(logit(p2));
    }
    u
}

pub fn from_unconstrained(u: &[f64]) -> Hyperparameters {
    let mut h = Hyperparameters::new(u[0].exp(), logistic(u[1]), logistic(u[2]));
    if u.len() == 5 {
        h.psi1 = Some(logistic(u[3]));
        h.psi2 = Some(logistic(u[4]));
    }
    h
}

/// Log density of `log tau`, including the Jacobian `tau`.
pub fn tau_log_prior_u(prior: &TauPcPrior, u: f64) -> f64 {
    let lambda = prior.lambda();
    (0.5 * lambda).ln() - 0.5 * u - lambda * (-0.5 * u).exp()
}

/// Log density of `logit x` for a prior on `x`, including the Jacobian
/// `x (1 - x)`. Evaluated from `u` so it stays finite in both tails.
pub fn mixing_log_prior_u(prior: &MixingPrior, u: f64) -> f64 {
    let log_x = -softplus(-u);
    let log_1mx = -softplus(u);
    match prior {
        MixingPrior::Uniform => log_x + log_1mx,
        MixingPrior::Pc(p) => {
            let theta = p.theta();
            theta.ln() - std::f64::consts::LN_2 - (-(-theta).exp_m1()).ln() - theta * (0.5 * log_x).exp()
                + 0.5 * log_x
                + log_1mx
        }
    }
}

/// Joint log prior of the transformed hyperparameters.
pub fn log_prior_u(priors: &PriorSpec, u: &[f64]) -> f64 {
    let mut lp = tau_log_prior_u(&priors.tau, u[0]) + mixing_log_prior_u(&priors.gamma, u[1]) + mixing_log_prior_u(&priors.phi(), u[2]);
    for &v in &u[3..] {
        lp += mixing_log_prior_u(&priors.psi(), v);
    }
    lp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Beta1,
    Eps1,
    Beta2,
    Eps2,
    Delta,
}

const BLOCKS: [Block; 5] = [Block::Beta1, Block::Eps1, Block::Beta2, Block::Eps2, Block::Delta];

impl Block {
    fn weight(self, w: &BlockWeights) -> f64 {
        match self {
            Block::Beta1 => w.beta1,
            Block::Eps1 => w.eps1,
            Block::Beta2 => w.beta2,
            Block::Eps2 => w.eps2,
            Block::Delta => w.delta,
        }
    }

    fn get(self, x: &LatentField) -> Option<&DVector<f64>> {
        match self {
            Block::Beta1 => Some(&x.beta1),
            Block::Eps1 => x.eps1.as_ref(),
            Block::Beta2 => Some(&x.beta2),
            Block::Eps2 => x.eps2.as_ref(),
            Block::Delta => Some(&x.delta),
        }
    }

    fn get_mut(self, x: &mut LatentField) -> Option<&mut DVector<f64>> {
        match self {
            Block::Beta1 => Some(&mut x.beta1),
            Block::Eps1 => x.eps1.as_mut(),
            Block::Beta2 => Some(&mut x.beta2),
            Block::Eps2 => x.eps2.as_mut(),
            Block::Delta => Some(&mut x.delta),
        }
    }

    /// Adds `scale * v` mapped onto the grid.
    fn add_to(self, eta: &mut DVector<f64>, v: &DVector<f64>, scale: f64, n_time: usize) {
        let n_space = eta.len() / n_time;
        match self {
            Block::Beta1 | Block::Eps1 => {
                for j in 0..n_space {
                    for i in 0..n_time {
                        eta[j * n_time + i] += scale * v[i];
                    }
                }
            }
            Block::Beta2 | Block::Eps2 => {
                for j in 0..n_space {
                    let s = scale * v[j];
                    for i in 0..n_time {
                        eta[j * n_time + i] += s;
                    }
                }
            }
            Block::Delta => eta.axpy(scale, v, 1.0),
        }
    }
}

/// Acceptance bookkeeping for one chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub hyper_proposed: usize,
    pub hyper_accepted: usize,
    pub centered_proposed: usize,
    pub centered_accepted: usize,
    pub intercept_proposed: usize,
    pub intercept_accepted: usize,
    pub ess_updates: usize,
    pub ess_shrinks: usize,
    pub ess_stalls: usize,
}

impl AcceptanceStats {
    fn rate(a: usize, p: usize) -> f64 {
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    pub fn hyper_rate(&self) -> f64 {
        Self::rate(self.hyper_accepted, self.hyper_proposed)
    }

    pub fn centered_rate(&self) -> f64 {
        Self::rate(self.centered_accepted, self.centered_proposed)
    }

    pub fn intercept_rate(&self) -> f64 {
        Self::rate(self.intercept_accepted, self.intercept_proposed)
    }

    pub fn mean_shrinks(&self) -> f64 {
        Self::rate(self.ess_shrinks, self.ess_updates)
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub iterations: Vec<usize>,
    pub tau: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi1: Option<Vec<f64>>,
    pub psi2: Option<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub log_lik: Vec<f64>,
    /// Per retained draw, the log-likelihood of each observed cell.
    pub pointwise: Vec<Vec<f64>>,
    pub eta_mean: Vec<f64>,
    pub latent_mean: LatentField,
    pub latent: Vec<LatentField>,
    pub acceptance: AcceptanceStats,
    pub max_constraint_residual: f64,
}

impl ChainDraws {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn hyperparameters(&self, k: usize) -> Hyperparameters {
        Hyperparameters {
            tau: self.tau[k],
            gamma: self.gamma[k],
            phi: self.phi[k],
            psi1: self.psi1.as_ref().map(|v| v[k]),
            psi2: self.psi2.as_ref().map(|v| v[k]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    pub has_iid: bool,
    pub n_intercepts: usize,
}

/// Name of a hyperparameter column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperName {
    Tau,
    Gamma,
    Phi,
    Psi1,
    Psi2,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::len).sum()
    }

    /// Draws of one hyperparameter per chain.
    pub fn per_chain(&self, name: HyperName) -> Option<Vec<&[f64]>> {
        self.chains
            .iter()
            .map(|c| match name {
                HyperName::Tau => Some(c.tau.as_slice()),
                HyperName::Gamma => Some(c.gamma.as_slice()),
                HyperName::Phi => Some(c.phi.as_slice()),
                HyperName::Psi1 => c.psi1.as_deref(),
                HyperName::Psi2 => c.psi2.as_deref(),
            })
            .collect()
    }

    /// Draws of one hyperparameter pooled over chains.
    pub fn pooled(&self, name: HyperName) -> Option<Vec<f64>> {
        self.per_chain(name).map(|v| v.concat())
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["chain", "iteration", "tau", "gamma", "phi"].iter().map(|s| s.to_string()).collect();
        if self.has_iid {
            names.push("psi1".into());
            names.push("psi2".into());
        }
        names.extend((1..=self.n_intercepts).map(|k| format!("alpha_{k}")));
        names.push("log_lik".into());
        names
    }

    /// One row per retained iteration; values printed in shortest
    /// round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| VpError::Validation(format!("writing draws: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.column_names()).map_err(io)?;
        for c in &self.chains {
            for k in 0..c.len() {
                let mut row = vec![c.chain.to_string(), c.iterations[k].to_string()];
                let h = c.hyperparameters(k);
                row.extend([h.tau, h.gamma, h.phi].iter().map(|v| format!("{v:?}")));
                if let (Some(p1), Some(p2)) = (h.psi1, h.psi2) {
                    row.push(format!("{p1:?}"));
                    row.push(format!("{p2:?}"));
                }
                row.extend(c.alpha[k].iter().map(|v| format!("{v:?}")));
                row.push(format!("{:?}", c.log_lik[k]));
                w.write_record(&row).map_err(io)?;
            }
        }
        w.flush().map_err(|e| VpError::Validation(format!("writing draws: {e}")))
    }
}

/// Hyperparameter rows read back from a draws CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawRow {
    pub chain: usize,
    pub iteration: usize,
    pub hyper: Hyperparameters,
    pub alpha: Vec<f64>,
    pub log_lik: f64,
}

pub fn read_draws_csv<R: std::io::Read>(reader: R) -> Result<Vec<DrawRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| VpError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let has_iid = headers.iter().any(|h| h == "psi1");
    let n_alpha = headers.iter().filter(|h| h.starts_with("alpha_")).count();
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| VpError::Parse { line, message: e.to_string() })?;
        let f = |k: usize| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| VpError::Parse { line, message: format!("missing column {k}") })?
                .parse::<f64>()
                .map_err(|e| VpError::Parse { line, message: e.to_string() })
        };
        let int = |k: usize| -> Result<usize> {
            rec.get(k)
                .unwrap_or("")
                .parse::<usize>()
                .map_err(|e| VpError::Parse { line, message: e.to_string() })
        };
        let mut hyper = Hyperparameters::new(f(2)?, f(3)?, f(4)?);
        let mut next = 5;
        if has_iid {
            hyper.psi1 = Some(f(5)?);
            hyper.psi2 = Some(f(6)?);
            next = 7;
        }
        let alpha = (0..n_alpha).map(|k| f(next + k)).collect::<Result<Vec<_>>>()?;
        rows.push(DrawRow {
            chain: int(0)?,
            iteration: int(1)?,
            hyper,
            alpha,
            log_lik: f(next + n_alpha)?,
        });
    }
    Ok(rows)
}

struct Chain<'a> {
    model: &'a VpModel,
    lik: &'a CellLikelihood,
    priors: &'a PriorSpec,
    u: Vec<f64>,
    lp: f64,
    w: BlockWeights,
    x: LatentField,
    eta: DVector<f64>,
    ll: f64,
    stats: AcceptanceStats,
}

impl<'a> Chain<'a> {
    fn prior_of(&self, b: Block) -> LatentPrior {
        match b {
            Block::Beta1 => self.model.beta1_prior().clone(),
            Block::Beta2 => self.model.beta2_prior().clone(),
            Block::Delta => self.model.delta_prior().clone(),
            Block::Eps1 => LatentPrior::Iid(self.model.n_time()),
            Block::Eps2 => LatentPrior::Iid(self.model.n_space()),
        }
    }

    fn refresh(&mut self) {
        self.eta = self.model.predictor_unchecked(&self.w, &self.x);
        self.ll = self.lik.log_likelihood(self.eta.as_slice());
    }

    fn ess_block<R: Rng>(&mut self, b: Block, prior: &LatentPrior, rng: &mut R) {
        let Some(current) = b.get(&self.x).cloned() else { return };
        let n_time = self.model.n_time();
        let weight = b.weight(&self.w);
        let mut base = self.eta.clone();
        b.add_to(&mut base, &current, -weight, n_time);
        let lik = self.lik;
        let mut buffer = base.clone();
        let step = ess_latent_update(
            &current,
            self.ll,
            prior,
            |v| {
                buffer.copy_from(&base);
                b.add_to(&mut buffer, v, weight, n_time);
                lik.log_likelihood(buffer.as_slice())
            },
            rng,
        );
        self.stats.ess_updates += 1;
        self.stats.ess_shrinks += step.shrinks;
        if step.stalled {
            self.stats.ess_stalls += 1;
            return;
        }
        b.add_to(&mut base, &step.state, weight, n_time);
        self.eta = base;
        self.ll = step.log_lik;
        *b.get_mut(&mut self.x).expect("block present") = step.state;
    }

    fn intercept_step<R: Rng>(&mut self, c: usize, scale: f64, rng: &mut R) -> bool {
        let z: f64 = rng.sample(StandardNormal);
        let old = self.x.alpha[c];
        let new = old + scale * z;
        let n_time = self.model.n_time();
        let mut eta = self.eta.clone();
        for (j, &owner) in self.model.intercept_of().iter().enumerate() {
            if owner == c {
                for i in 0..n_time {
                    eta[j * n_time + i] += new - old;
                }
            }
        }
        let ll = self.lik.log_likelihood(eta.as_slice());
        let prior = |a: f64| -0.5 * (a / INTERCEPT_SD).powi(2);
        let log_ratio = ll - self.ll + prior(new) - prior(old);
        self.stats.intercept_proposed += 1;
        if rng.gen::<f64>().ln() < log_ratio {
            self.x.alpha[c] = new;
            self.eta = eta;
            self.ll = ll;
            self.stats.intercept_accepted += 1;
            true
        } else {
            false
        }
    }

    fn propose<R: Rng>(&self, scales: &[f64], rng: &mut R) -> Vec<f64> {
        self.u
            .iter()
            .zip(scales)
            .map(|(u, s)| u + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Random walk on the hyperparameters with the latent blocks fixed.
    fn hyper_step<R: Rng>(&mut self, scales: &[f64], rng: &mut R) -> bool {
        let u_new = self.propose(scales, rng);
        self.stats.hyper_proposed += 1;
        let lp_new = log_prior_u(self.priors, &u_new);
        let h_new = from_unconstrained(&u_new);
        let w_new = h_new.weights();
        if !lp_new.is_finite() || w_new.as_array().iter().any(|v| !v.is_finite()) {
            return false;
        }
        let eta_new = self.model.predictor_unchecked(&w_new, &self.x);
        let ll_new = self.lik.log_likelihood(eta_new.as_slice());
        let log_ratio = ll_new - self.ll + lp_new - self.lp;
        if rng.gen::<f64>().ln() < log_ratio {
            self.u = u_new;
            self.lp = lp_new;
            self.w = w_new;
            self.eta = eta_new;
            self.ll = ll_new;
            self.stats.hyper_accepted += 1;
            true
        } else {
            false
        }
    }

    /// Random walk on the hyperparameters with every block rescaled by
    /// `w_old / w_new`, leaving the predictor unchanged.
    fn centered_step<R: Rng>(&mut self, scales: &[f64], rng: &mut R) -> bool {
        let u_new = self.propose(scales, rng);
        self.stats.centered_proposed += 1;
        let lp_new = log_prior_u(self.priors, &u_new);
        let w_new = from_unconstrained(&u_new).weights();
        if !lp_new.is_finite() {
            return false;
        }
        let mut log_ratio = lp_new - self.lp;
        let mut ratios = [1.0; 5];
        for (k, b) in BLOCKS.iter().enumerate() {
            let Some(v) = b.get(&self.x) else { continue };
            let (old, new) = (b.weight(&self.w), b.weight(&w_new));
            let s = old / new;
            if !(s.is_finite() && s > 0.0) {
                return false;
            }
            ratios[k] = s;
            let prior = self.prior_of(*b);
            log_ratio += -0.5 * (s * s - 1.0) * prior.quadratic_form(v) + prior.rank() as f64 * s.ln();
        }
        if !log_ratio.is_finite() || rng.gen::<f64>().ln() >= log_ratio {
            return false;
        }
        for (k, b) in BLOCKS.iter().enumerate() {
            if let Some(v) = b.get_mut(&mut self.x) {
                *v *= ratios[k];
            }
        }
        self.u = u_new;
        self.lp = lp_new;
        self.w = w_new;
        self.refresh();
        self.stats.centered_accepted += 1;
        true
    }

    fn constraint_residual(&self) -> f64 {
        let m = self.model;
        let mut r = m.beta1_prior().null_residual(&self.x.beta1);
        r = r.max(m.beta2_prior().null_residual(&self.x.beta2));
        r.max(m.delta_prior().null_residual(&self.x.delta))
    }
}

/// Robbins-Monro step size for adaptation at iteration `t`.
fn rm_gain(t: usize) -> f64 {
    ((t + 1) as f64).powf(-0.6)
}

/// Starting intercept: the pooled logit (binomial) or log (Poisson) rate.
fn initial_intercept(lik_data: &Dataset, family: Family) -> f64 {
    let (mut y, mut e) = (0.0, 0.0);
    for (k, v) in lik_data.y().iter().enumerate() {
        if let Some(v) = v {
            y += *v as f64;
            e += lik_data.exposure()[k];
        }
    }
    if y <= 0.0 || e <= 0.0 {
        return 0.0;
    }
    match family {
        Family::Binomial if y < e => logit((y + 0.5) / (e + 1.0)),
        Family::Binomial => 0.0,
        Family::Poisson => (y / e).ln(),
    }
}

fn run_chain(
    data: &Dataset,
    model: &VpModel,
    lik: &CellLikelihood,
    priors: &PriorSpec,
    cfg: &McmcConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let iid = model.spec().include_iid_main;
    let mut h0 = Hyperparameters::new(priors.tau.quantile(0.5)?, priors.gamma.median(), priors.phi().median());
    if iid {
        h0.psi1 = Some(priors.psi().median());
        h0.psi2 = Some(priors.psi().median());
    }
    let u0 = to_unconstrained(&h0);
    let mut x = model.zero_field();
    x.alpha.fill(initial_intercept(data, model.spec().family));
    let w = h0.weights();
    let mut state = Chain {
        model,
        lik,
        priors,
        lp: log_prior_u(priors, &u0),
        u: u0,
        w,
        x,
        eta: DVector::zeros(model.n_cells()),
        ll: 0.0,
        stats: AcceptanceStats::default(),
    };
    state.refresh();
    if !state.ll.is_finite() || !state.lp.is_finite() {
        return Err(VpError::Initialization(format!(
            "non-finite log posterior at the start of chain {chain}: log-likelihood {}, log prior {}, hyperparameters {:?}, intercepts {:?}",
            state.ll,
            state.lp,
            h0,
            state.x.alpha.as_slice()
        )));
    }

    let dim = state.u.len();
    let mut shape = vec![0.5; dim];
    let mut log_scale_nc = (2.38 / (dim as f64).sqrt()).ln();
    let mut log_scale_c = log_scale_nc;
    let mut intercept_scales = vec![0.1; model.n_intercepts()];
    // running moments of u during burn-in for the proposal shape
    let (mut n_seen, mut mean_u, mut m2_u) = (0usize, vec![0.0; dim], vec![0.0; dim]);

    let priors_by_block: Vec<LatentPrior> = BLOCKS.iter().map(|b| state.prior_of(*b)).collect();
    let n_keep = cfg.n_retained();
    let mut out = ChainDraws {
        chain,
        iterations: Vec::with_capacity(n_keep),
        tau: Vec::with_capacity(n_keep),
        gamma: Vec::with_capacity(n_keep),
        phi: Vec::with_capacity(n_keep),
        psi1: iid.then(|| Vec::with_capacity(n_keep)),
        psi2: iid.then(|| Vec::with_capacity(n_keep)),
        alpha: Vec::with_capacity(n_keep),
        log_lik: Vec::with_capacity(n_keep),
        pointwise: Vec::with_capacity(n_keep),
        eta_mean: vec![0.0; model.n_cells()],
        latent_mean: model.zero_field(),
        latent: Vec::new(),
        acceptance: AcceptanceStats::default(),
        max_constraint_residual: 0.0,
    };

    for it in 0..cfg.n_iterations {
        let adapting = it < cfg.burn_in;
        for (b, prior) in BLOCKS.iter().zip(&priors_by_block) {
            state.ess_block(*b, prior, &mut rng);
        }
        for (c, scale) in intercept_scales.iter_mut().enumerate() {
            let acc = state.intercept_step(c, *scale, &mut rng);
            if adapting {
                let target = cfg.scalar_target_acceptance;
                *scale *= (rm_gain(it) * (acc as u8 as f64 - target)).exp();
            }
        }
        let scales_nc: Vec<f64> = shape.iter().map(|s| s * log_scale_nc.exp()).collect();
        let acc = state.hyper_step(&scales_nc, &mut rng);
        if adapting {
            log_scale_nc += rm_gain(it) * (acc as u8 as f64 - cfg.target_acceptance);
        }
        let scales_c: Vec<f64> = shape.iter().map(|s| s * log_scale_c.exp()).collect();
        let acc = state.centered_step(&scales_c, &mut rng);
        if adapting {
            log_scale_c += rm_gain(it) * (acc as u8 as f64 - cfg.target_acceptance);
            n_seen += 1;
            for k in 0..dim {
                let d = state.u[k] - mean_u[k];
                mean_u[k] += d / n_seen as f64;
                m2_u[k] += d * (state.u[k] - mean_u[k]);
            }
            if n_seen >= 2 * cfg.adapt_window && (it + 1) % cfg.adapt_window == 0 {
                for k in 0..dim {
                    shape[k] = (m2_u[k] / (n_seen - 1) as f64).sqrt().clamp(1e-3, 5.0);
                }
            }
        }

        if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thin) {
            let h = from_unconstrained(&state.u);
            out.iterations.push(it);
            out.tau.push(h.tau);
            out.gamma.push(h.gamma);
            out.phi.push(h.phi);
            if let (Some(a), Some(b)) = (out.psi1.as_mut(), out.psi2.as_mut()) {
                a.push(h.psi1.expect("iid model"));
                b.push(h.psi2.expect("iid model"));
            }
            out.alpha.push(state.x.alpha.iter().copied().collect());
            out.log_lik.push(state.ll);
            out.pointwise.push(lik.observed_pointwise(state.eta.as_slice()));
            for (m, e) in out.eta_mean.iter_mut().zip(state.eta.iter()) {
                *m += e;
            }
            accumulate(&mut out.latent_mean, &state.x, &state.w);
            out.max_constraint_residual = out.max_constraint_residual.max(state.constraint_residual());
            let kept = out.iterations.len();
            if cfg.latent_thin > 0 && (kept - 1).is_multiple_of(cfg.latent_thin) {
                out.latent.push(state.x.clone());
            }
        }
    }
    let n = out.iterations.len() as f64;
    for m in out.eta_mean.iter_mut() {
        *m /= n;
    }
    scale_field(&mut out.latent_mean, 1.0 / n);
    out.acceptance = state.stats;
    log::debug!(
        "chain {chain}: hyper acceptance {:.3}, centered {:.3}, intercept {:.3}, mean ESS shrinks {:.2}",
        out.acceptance.hyper_rate(),
        out.acceptance.centered_rate(),
        out.acceptance.intercept_rate(),
        out.acceptance.mean_shrinks()
    );
    Ok(out)
}

/// Adds each block's contribution on the predictor scale (weight times
/// latent values), so the posterior mean is comparable across draws.
fn accumulate(acc: &mut LatentField, x: &LatentField, w: &BlockWeights) {
    acc.alpha += &x.alpha;
    acc.beta1.axpy(w.beta1, &x.beta1, 1.0);
    acc.beta2.axpy(w.beta2, &x.beta2, 1.0);
    acc.delta.axpy(w.delta, &x.delta, 1.0);
    if let (Some(a), Some(v)) = (acc.eps1.as_mut(), x.eps1.as_ref()) {
        a.axpy(w.eps1, v, 1.0);
    }
    if let (Some(a), Some(v)) = (acc.eps2.as_mut(), x.eps2.as_ref()) {
        a.axpy(w.eps2, v, 1.0);
    }
}

fn scale_field(x: &mut LatentField, s: f64) {
    x.alpha *= s;
    x.beta1 *= s;
    x.beta2 *= s;
    x.delta *= s;
    if let Some(v) = x.eps1.as_mut() {
        *v *= s;
    }
    if let Some(v) = x.eps2.as_mut() {
        *v *= s;
    }
}

/// Runs `cfg.n_chains` independent chains; chain `k` uses stream `k` of
/// the generator seeded with `cfg.seed`.
pub fn run_mcmc(data: &Dataset, model: &VpModel, priors: &PriorSpec, cfg: &McmcConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if data.n_time() != model.n_time() || data.n_space() != model.n_space() {
        return Err(VpError::Validation(format!(
            "dataset is {} x {}, model is {} x {}",
            data.n_time(),
            data.n_space(),
            model.n_time(),
            model.n_space()
        )));
    }
    let lik = &CellLikelihood::new(data, model.spec().family)?;
    let chains: Vec<Result<ChainDraws>> = if cfg.jobs <= 1 || cfg.n_chains == 1 {
        (0..cfg.n_chains).map(|c| run_chain(data, model, lik, priors, cfg, c)).collect()
    } else {
        let mut results: Vec<Option<Result<ChainDraws>>> = (0..cfg.n_chains).map(|_| None).collect();
        for batch in (0..cfg.n_chains).collect::<Vec<_>>().chunks(cfg.jobs) {
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|&c| (c, s.spawn(move || run_chain(data, model, lik, priors, cfg, c))))
                    .collect();
                for (c, handle) in handles {
                    results[c] = Some(handle.join().unwrap_or_else(|_| {
                        Err(VpError::Numerical(format!("chain {c} panicked")))
                    }));
                }
            });
        }
        results.into_iter().map(|r| r.expect("every chain ran")).collect()
    };
    Ok(PosteriorDraws {
        chains: chains.into_iter().collect::<Result<Vec<_>>>()?,
        has_iid: model.spec().include_iid_main,
        n_intercepts: model.n_intercepts(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AdjacencyGraph;
    use crate::interaction::InteractionType;
    use crate::model::ModelSpec;
    use crate::priors::GammaPcPrior;

    #[test]
    fn transform_round_trip() {
        let h = Hyperparameters::with_iid(3.7, 0.123, 0.876, 0.01, 0.99);
        let back = from_unconstrained(&to_unconstrained(&h));
        assert!((back.tau / h.tau - 1.0).abs() < 1e-14);
        assert!((back.gamma - h.gamma).abs() < 1e-14);
        assert!((back.phi - h.phi).abs() < 1e-14);
        assert!((back.psi1.unwrap() - 0.01).abs() < 1e-14);
        assert!((back.psi2.unwrap() - 0.99).abs() < 1e-14);
    }

    #[test]
    fn transformed_priors_match_densities() {
        let tau = TauPcPrior::elicit(1.0, 0.01).unwrap();
        for t in [0.05_f64, 1.0, 30.0] {
            let expected = tau.log_density(t).unwrap() + t.ln();
            assert!((tau_log_prior_u(&tau, t.ln()) - expected).abs() < 1e-12);
        }
        let pc = MixingPrior::Pc(GammaPcPrior::elicit(0.5, 0.99).unwrap());
        for g in [0.01_f64, 0.3, 0.97] {
            for p in [pc, MixingPrior::Uniform] {
                let expected = p.log_density(g).unwrap() + (g * (1.0 - g)).ln();
                assert!((mixing_log_prior_u(&p, logit(g)) - expected).abs() < 1e-12);
            }
        }
        assert!(mixing_log_prior_u(&pc, -80.0).is_finite());
        assert!(mixing_log_prior_u(&pc, 80.0).is_finite());
    }

    #[test]
    fn config_validation() {
        let mut c = McmcConfig::default();
        assert!(c.validate().is_ok());
        c.burn_in = c.n_iterations;
        assert!(c.validate().is_err());
        c = McmcConfig { thin: 0, ..McmcConfig::default() };
        assert!(c.validate().is_err());
    }

    fn small_problem() -> (Dataset, VpModel) {
        let graph = AdjacencyGraph::lattice(2, 2).unwrap();
        let spec = ModelSpec::new(Family::Binomial, 1, InteractionType::IV, false, 4, graph).unwrap();
        let model = VpModel::new(spec).unwrap();
        let y = (0..16).map(|k| Some((k % 5) as u64 + 1)).collect();
        let data = Dataset::new(4, 4, y, vec![50.0; 16]).unwrap();
        (data, model)
    }

    #[test]
    fn deterministic_given_seed() {
        let (data, model) = small_problem();
        let cfg = McmcConfig {
            n_iterations: 300,
            burn_in: 100,
            thin: 2,
            n_chains: 2,
            seed: 7,
            ..McmcConfig::default()
        };
        let a = run_mcmc(&data, &model, &PriorSpec::default(), &cfg).unwrap();
        let b = run_mcmc(&data, &model, &PriorSpec::default(), &McmcConfig { jobs: 2, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chains[0].len(), 100);
        assert_ne!(a.chains[0].gamma, a.chains[1].gamma);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_csv(&mut buf_a).unwrap();
        b.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn draws_csv_round_trip() {
        let (data, model) = small_problem();
        let cfg = McmcConfig {
            n_iterations: 60,
            burn_in: 10,
            thin: 5,
            ..McmcConfig::default()
        };
        let draws = run_mcmc(&data, &model, &PriorSpec::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        draws.write_csv(&mut buf).unwrap();
        let rows = read_draws_csv(buf.as_slice()).unwrap();
        let c = &draws.chains[0];
        assert_eq!(rows.len(), c.len());
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.hyper, c.hyperparameters(k));
            assert_eq!(r.alpha, c.alpha[k]);
            assert_eq!(r.log_lik, c.log_lik[k]);
        }
    }

    #[test]
    fn constraints_hold_and_domains_respected() {
        let (data, model) = small_problem();
        let cfg = McmcConfig {
            n_iterations: 2_000,
            burn_in: 500,
            thin: 5,
            latent_thin: 10,
            ..McmcConfig::default()
        };
        let draws = run_mcmc(&data, &model, &PriorSpec::default(), &cfg).unwrap();
        let c = &draws.chains[0];
        assert!(c.max_constraint_residual < 1e-9, "{}", c.max_constraint_residual);
        assert!(c.gamma.iter().all(|g| *g > 0.0 && *g < 1.0));
        assert!(c.phi.iter().all(|g| *g > 0.0 && *g < 1.0));
        assert!(c.tau.iter().all(|t| *t > 0.0));
        for x in &c.latent {
            model.validate_field(x).unwrap();
        }
    }

    #[test]
    fn counts_without_trials_rejected() {
        let (_, model) = small_problem();
        let bad = Dataset::new(4, 4, vec![Some(1); 16], vec![0.0; 16]).unwrap();
        let cfg = McmcConfig {
            n_iterations: 10,
            burn_in: 1,
            ..McmcConfig::default()
        };
        // a count with zero trials is a data error, caught before sampling
        assert!(matches!(run_mcmc(&bad, &model, &PriorSpec::default(), &cfg), Err(VpError::Validation(_))));
    }
}
