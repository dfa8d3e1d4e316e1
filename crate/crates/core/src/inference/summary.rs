//! Posterior summaries: quantiles, variance-partitioning tables, DIC/WAIC
//! and convergence checks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};
use crate::model::{CellLikelihood, Dataset, VpModel};

use super::mcmc::{HyperName, PosteriorDraws};

/// Empirical quantile with linear interpolation between order statistics
/// (type 7).
pub fn quantile_type7(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(VpError::Validation("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(VpError::Validation(format!("probability {p} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&sorted, p))
}

fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Mean with a central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(VpError::Validation("summary of an empty sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lower = sorted_quantile(&sorted, 0.025);
        let upper = sorted_quantile(&sorted, 0.975);
        // rounding in the sum can push the mean of a constant sample past its bounds
        let mean = mean(values).clamp(sorted[0], sorted[sorted.len() - 1]);
        Ok(Self { mean, lower, upper })
    }

    /// Summary of `1 - x` from the summary of `x`.
    pub fn complement(&self) -> Self {
        Self {
            mean: 1.0 - self.mean,
            lower: 1.0 - self.upper,
            upper: 1.0 - self.lower,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpRow {
    pub level1: String,
    pub level2: String,
    pub estimator: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Variance-partitioning table: interaction vs main effects, space vs
/// time within the main effects, and structured vs iid within each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpTable {
    pub rows: Vec<VpRow>,
    pub notes: Vec<String>,
}

fn row(level1: &str, level2: &str, estimator: &str, s: Interval) -> VpRow {
    VpRow {
        level1: level1.into(),
        level2: level2.into(),
        estimator: estimator.into(),
        mean: s.mean,
        lower: s.lower,
        upper: s.upper,
    }
}

pub fn vp_table(draws: &PosteriorDraws) -> Result<VpTable> {
    if draws.n_draws() == 0 {
        return Err(VpError::Validation("no posterior draws".into()));
    }
    let gamma = Interval::of(&draws.pooled(HyperName::Gamma).expect("gamma is always drawn"))?;
    let phi = Interval::of(&draws.pooled(HyperName::Phi).expect("phi is always drawn"))?;
    let mut rows = vec![
        row("total", "interaction", "gamma", gamma),
        row("total", "main", "1-gamma", gamma.complement()),
        row("main", "space", "phi", phi),
        row("main", "time", "1-phi", phi.complement()),
    ];
    let mut notes = Vec::new();
    match (draws.pooled(HyperName::Psi2), draws.pooled(HyperName::Psi1)) {
        (Some(psi2), Some(psi1)) => {
            let psi2 = Interval::of(&psi2)?;
            let psi1 = Interval::of(&psi1)?;
            rows.push(row("space", "structured", "1-psi2", psi2.complement()));
            rows.push(row("space", "iid", "psi2", psi2));
            rows.push(row("time", "structured", "1-psi1", psi1.complement()));
            rows.push(row("time", "iid", "psi1", psi1));
        }
        _ => notes.push("model has no iid main effects; psi rows omitted".into()),
    }
    Ok(VpTable { rows, notes })
}

impl VpTable {
    pub fn get(&self, estimator: &str) -> Option<&VpRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| VpError::Validation(format!("writing table: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["level1", "level2", "estimator", "mean", "q025", "q975"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.level1.clone(),
                r.level2.clone(),
                r.estimator.clone(),
                format!("{:?}", r.mean),
                format!("{:?}", r.lower),
                format!("{:?}", r.upper),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| VpError::Validation(format!("writing table: {e}")))
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| VpError::Parse { line, message: e.to_string() })?;
            let num = |k: usize| {
                rec.get(k)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| VpError::Parse { line, message: e.to_string() })
            };
            rows.push(VpRow {
                level1: rec.get(0).unwrap_or("").into(),
                level2: rec.get(1).unwrap_or("").into(),
                estimator: rec.get(2).unwrap_or("").into(),
                mean: num(3)?,
                lower: num(4)?,
                upper: num(5)?,
            });
        }
        Ok(Self { rows, notes: Vec::new() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean of the linear predictor.
    pub deviance_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub n_draws: usize,
    /// Fewer than 100 draws were available.
    pub unstable: bool,
}

pub const MIN_STABLE_DRAWS: usize = 100;

/// DIC with `p_D = mean deviance - deviance at the mean predictor`, and
/// WAIC from the pointwise log-likelihood of every observed cell.
pub fn dic_waic(draws: &PosteriorDraws, data: &Dataset, model: &VpModel) -> Result<InformationCriteria> {
    let n = draws.n_draws();
    if n == 0 {
        return Err(VpError::Validation("no posterior draws".into()));
    }
    let unstable = n < MIN_STABLE_DRAWS;
    if unstable {
        log::warn!("information criteria from only {n} draws are unstable");
    }
    let lik = CellLikelihood::new(data, model.spec().family)?;
    let mut eta_mean = vec![0.0; data.n_cells()];
    for c in &draws.chains {
        let share = c.len() as f64 / n as f64;
        for (m, e) in eta_mean.iter_mut().zip(&c.eta_mean) {
            *m += share * e;
        }
    }
    let mean_deviance = -2.0 * draws.chains.iter().flat_map(|c| c.log_lik.iter()).sum::<f64>() / n as f64;
    let deviance_at_mean = -2.0 * lik.log_likelihood(&eta_mean);
    let p_d = mean_deviance - deviance_at_mean;

    let n_obs = lik.n_observed();
    let (mut lppd, mut p_waic) = (0.0, 0.0);
    let mut column = Vec::with_capacity(n);
    for i in 0..n_obs {
        column.clear();
        column.extend(draws.chains.iter().flat_map(|c| c.pointwise.iter().map(move |p| p[i])));
        let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (column.iter().map(|v| (v - max).exp()).sum::<f64>() / n as f64).ln();
        lppd += lse;
        if n > 1 {
            p_waic += variance(&column);
        }
    }
    Ok(InformationCriteria {
        mean_deviance,
        deviance_at_mean,
        p_d,
        dic: mean_deviance + p_d,
        lppd,
        p_waic,
        waic: -2.0 * (lppd - p_waic),
        n_draws: n,
        unstable,
    })
}

/// Split potential scale reduction factor.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(VpError::Validation("R-hat needs at least 4 draws per chain".into()));
    }
    for c in chains {
        let c = &c[c.len() - 2 * n..];
        halves.push(&c[..n]);
        halves.push(&c[n..]);
    }
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let nf = n as f64;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / m;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Kolmogorov-Smirnov distance between a sample and a continuous cdf.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
