use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;
use vpmap_core::inference::{dic_waic, run_mcmc, split_rhat, vp_table, HyperName, InformationCriteria, PosteriorDraws, VpTable};
use vpmap_core::inference::mcmc::AcceptanceStats;
use vpmap_core::model::{Dataset, LatentField, ModelSpec, VpModel};
use vpmap_core::AdjacencyGraph;

use crate::config::{resolve, Command};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::Invocation;

pub fn load_graph(path: &Path) -> CliResult<AdjacencyGraph> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    AdjacencyGraph::parse(BufReader::new(f)).map_err(|e| CliError::from(e).with_context(path.display()))
}

pub fn load_dataset(path: &Path, n_time: usize, n_space: usize) -> CliResult<Dataset> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Dataset::read_csv(BufReader::new(f), n_time, n_space).map_err(|e| CliError::from(e).with_context(path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub draws: usize,
    pub acceptance: AcceptanceStats,
    pub hyper_rate: f64,
    pub centered_rate: f64,
    pub intercept_rate: f64,
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub n_chains: usize,
    pub n_draws: usize,
    pub rhat_gamma: Option<f64>,
    pub rhat_phi: Option<f64>,
    pub rhat_tau: Option<f64>,
    pub max_constraint_residual: f64,
    pub information_criteria: InformationCriteria,
    pub chains: Vec<ChainDiagnostics>,
}

pub fn diagnostics(draws: &PosteriorDraws, data: &Dataset, model: &VpModel) -> CliResult<Diagnostics> {
    let rhat = |name| draws.per_chain(name).and_then(|c| split_rhat(&c).ok());
    let chains: Vec<ChainDiagnostics> = draws
        .chains
        .iter()
        .map(|c| ChainDiagnostics {
            chain: c.chain,
            draws: c.len(),
            acceptance: c.acceptance.clone(),
            hyper_rate: c.acceptance.hyper_rate(),
            centered_rate: c.acceptance.centered_rate(),
            intercept_rate: c.acceptance.intercept_rate(),
            max_constraint_residual: c.max_constraint_residual,
        })
        .collect();
    Ok(Diagnostics {
        n_chains: draws.chains.len(),
        n_draws: draws.n_draws(),
        rhat_gamma: rhat(HyperName::Gamma),
        rhat_phi: rhat(HyperName::Phi),
        rhat_tau: rhat(HyperName::Tau),
        max_constraint_residual: chains.iter().map(|c| c.max_constraint_residual).fold(0.0, f64::max),
        information_criteria: dic_waic(draws, data, model)?,
        chains,
    })
}

/// Posterior means of the weighted latent contributions, averaged over
/// chains.
pub fn pooled_effects(draws: &PosteriorDraws) -> Option<LatentField> {
    let mut it = draws.chains.iter();
    let mut acc = it.next()?.latent_mean.clone();
    let n = draws.chains.len() as f64;
    for c in it {
        let m = &c.latent_mean;
        acc.alpha += &m.alpha;
        acc.beta1 += &m.beta1;
        acc.beta2 += &m.beta2;
        acc.delta += &m.delta;
        if let (Some(a), Some(b)) = (acc.eps1.as_mut(), m.eps1.as_ref()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (acc.eps2.as_mut(), m.eps2.as_ref()) {
            *a += b;
        }
    }
    acc.alpha /= n;
    acc.beta1 /= n;
    acc.beta2 /= n;
    acc.delta /= n;
    if let Some(a) = acc.eps1.as_mut() {
        *a /= n;
    }
    if let Some(a) = acc.eps2.as_mut() {
        *a /= n;
    }
    Some(acc)
}

/// CSV `block,index,time,area,mean`; `time`/`area` are empty where they do
/// not apply.
pub fn effects_csv(x: &LatentField, n_time: usize) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::numerical(format!("effects csv: {e}"));
    w.write_record(["block", "index", "time", "area", "mean"]).map_err(err)?;
    let mut put = |block: &str, i: usize, t: Option<usize>, a: Option<usize>, v: f64| {
        let opt = |o: Option<usize>| o.map(|k| k.to_string()).unwrap_or_default();
        w.write_record([block.to_string(), i.to_string(), opt(t), opt(a), v.to_string()])
    };
    for (i, v) in x.alpha.iter().enumerate() {
        put("alpha", i, None, None, *v).map_err(err)?;
    }
    for (i, v) in x.beta1.iter().enumerate() {
        put("beta1", i, Some(i), None, *v).map_err(err)?;
    }
    if let Some(e) = &x.eps1 {
        for (i, v) in e.iter().enumerate() {
            put("eps1", i, Some(i), None, *v).map_err(err)?;
        }
    }
    for (j, v) in x.beta2.iter().enumerate() {
        put("beta2", j, None, Some(j), *v).map_err(err)?;
    }
    if let Some(e) = &x.eps2 {
        for (j, v) in e.iter().enumerate() {
            put("eps2", j, None, Some(j), *v).map_err(err)?;
        }
    }
    for (k, v) in x.delta.iter().enumerate() {
        put("delta", k, Some(k % n_time), Some(k / n_time), *v).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::numerical(format!("effects csv: {e}")))
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub table: VpTable,
    pub diagnostics: Diagnostics,
}

pub fn run(inv: &Invocation) -> CliResult<FitReport> {
    let cfg = &inv.config;
    cfg.validate(Command::Fit)?;
    let m = cfg.model_section(Command::Fit)?;
    let d = cfg.data.as_ref().expect("validated");
    let priors = cfg.priors.as_ref().expect("validated").build()?;
    let mcmc = inv.mcmc_config(Command::Fit)?;

    let graph_path = resolve(&inv.base_dir, &d.graph);
    let counts_path = resolve(&inv.base_dir, &d.counts);
    let graph = load_graph(&graph_path)?;
    let data = load_dataset(&counts_path, d.n_time, graph.n_areas())?;
    let spec = ModelSpec::new(m.family, m.temporal_order, m.interaction_type, m.include_iid_main, d.n_time, graph)?;
    let model = VpModel::new(spec)?;
    data.validate_for(m.family)?;

    log::info!(
        "fitting {} cells ({} observed), {} chain(s) of {} iterations",
        data.n_cells(),
        data.n_observed(),
        mcmc.n_chains,
        mcmc.n_iterations
    );
    let draws = run_mcmc(&data, &model, &priors, &mcmc)?;
    let table = vp_table(&draws)?;
    let diag = diagnostics(&draws, &data, &model)?;

    let mut out = OutputDir::create(&inv.output_dir())?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    out.write("vp_table.csv", &buf)?;
    out.write_json("vp_table.json", &table)?;
    let mut buf = Vec::new();
    draws.write_csv(&mut buf)?;
    out.write("draws.csv", &buf)?;
    out.write_json("diagnostics.json", &diag)?;
    if let Some(effects) = pooled_effects(&draws) {
        out.write("effects.csv", &effects_csv(&effects, model.n_time())?)?;
    }
    let mut manifest = inv.manifest(Command::Fit, Some(mcmc.seed), mcmc.jobs);
    manifest.add_input("counts", &counts_path)?;
    manifest.add_input("graph", &graph_path)?;
    manifest.finish(&mut out)?;
    Ok(FitReport {
        table,
        diagnostics: diag,
    })
}
