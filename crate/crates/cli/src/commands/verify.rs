use serde::Serialize;
use vpmap_core::kld::{distance_curve, KldReport, VerifyConfig};
use vpmap_core::{icar_structure, rw_structure, AdjacencyGraph, Result as CoreResult, VpError};

use crate::commands::fit::load_graph;
use crate::config::{resolve, Command, VerifySection};
use crate::error::{CliError, CliResult, ExitKind};
use crate::output::OutputDir;
use crate::Invocation;

/// One line of `kld_report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct KldRow {
    #[serde(rename = "type")]
    pub kind: String,
    pub n1: usize,
    pub n2: usize,
    pub order: usize,
    pub iid: bool,
    pub gamma: Option<f64>,
    pub distance: Option<f64>,
    pub ratio: Option<f64>,
    pub expected_constant: Option<f64>,
    pub fitted_constant: Option<f64>,
    pub ratio_spread: Option<f64>,
    pub pass: bool,
    pub error: String,
}

fn rows_for(cfg: &VerifyConfig, iid: bool, result: &CoreResult<KldReport>) -> Vec<KldRow> {
    let base = KldRow {
        kind: format!("{:?}", cfg.interaction_type),
        n1: cfg.n_time,
        n2: cfg.n_space,
        order: cfg.rw_order,
        iid,
        gamma: None,
        distance: None,
        ratio: None,
        expected_constant: None,
        fitted_constant: None,
        ratio_spread: None,
        pass: false,
        error: String::new(),
    };
    match result {
        Err(e) => vec![KldRow {
            error: e.to_string(),
            ..base
        }],
        Ok(r) => r
            .grid
            .iter()
            .zip(&r.distances)
            .zip(&r.ratios)
            .map(|((g, d), q)| KldRow {
                gamma: Some(*g),
                distance: Some(*d),
                ratio: Some(*q),
                expected_constant: Some(r.expected_constant),
                fitted_constant: Some(r.ratio_mean),
                ratio_spread: Some(r.ratio_spread),
                pass: r.passes(),
                ..base.clone()
            })
            .collect(),
    }
}

pub fn configs(v: &VerifySection, graph: Option<&AdjacencyGraph>) -> Vec<VerifyConfig> {
    let n_space = graph.map(|g| g.n_areas()).unwrap_or(v.n_space);
    let mut out = Vec::new();
    for &kind in &v.types {
        for &order in &v.orders {
            for &iid in &v.iid {
                let mut c = VerifyConfig::path(kind, v.n_time, n_space, order, v.phi);
                c.graph = graph.cloned();
                if iid {
                    c = c.with_iid(v.psi[0], v.psi[1]);
                }
                out.push(c);
            }
        }
    }
    out
}

/// Evaluates the curve on the structures as given, without scaling.
fn run_unscaled(c: &VerifyConfig, gamma0: f64, grid: &[f64]) -> CoreResult<KldReport> {
    let graph = match &c.graph {
        Some(g) => g.clone(),
        None => AdjacencyGraph::path(c.n_space)?,
    };
    let time = rw_structure(c.n_time, c.rw_order)?;
    let space = icar_structure(&graph)?;
    distance_curve(c.interaction_type, &time, &space, c.phi, c.psi, gamma0, grid)
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<KldRow>,
    pub all_passed: bool,
}

pub fn run(inv: &Invocation) -> CliResult<VerifyReport> {
    inv.config.validate(Command::VerifyPrior)?;
    let v = inv.config.verify_prior.as_ref().expect("validated");
    let graph_path = v.graph.as_deref().map(|g| resolve(&inv.base_dir, g));
    let graph = graph_path.as_deref().map(load_graph).transpose()?;

    let mut rows = Vec::new();
    let mut first_error: Option<VpError> = None;
    let mut all_passed = true;
    for c in configs(v, graph.as_ref()) {
        let result = if v.scaled {
            c.run(v.gamma0, &v.grid)
        } else {
            run_unscaled(&c, v.gamma0, &v.grid)
        };
        let passed = matches!(&result, Ok(r) if r.passes());
        all_passed &= passed;
        match &result {
            Ok(r) => log::info!(
                "type {:?} order {} iid {}: constant {:.6} vs {:.6}, spread {:.2e} -> {}",
                r.interaction_type,
                r.rw_order,
                r.includes_iid,
                r.ratio_mean,
                r.expected_constant,
                r.ratio_spread,
                if passed { "pass" } else { "FAIL" }
            ),
            Err(e) => log::warn!("type {:?} order {}: {e}", c.interaction_type, c.rw_order),
        }
        rows.extend(rows_for(&c, c.psi.is_some(), &result));
        if let Err(e) = result {
            first_error.get_or_insert(e);
        }
    }

    let mut out = OutputDir::create(&inv.output_dir())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::numerical(format!("kld report: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::numerical(format!("kld report: {e}")))?;
    out.write("kld_report.csv", &bytes)?;
    let mut manifest = inv.manifest(Command::VerifyPrior, None, 1);
    if let Some(p) = &graph_path {
        manifest.add_input("graph", p)?;
    }
    manifest.finish(&mut out)?;

    if let Some(e) = first_error {
        return Err(CliError::from(e));
    }
    if !all_passed {
        return Err(CliError::new(ExitKind::Verification, "distance verification failed; see kld_report.csv"));
    }
    Ok(VerifyReport { rows, all_passed })
}

/// Parses `kld_report.csv` back into rows.
pub fn read_report<R: std::io::Read>(reader: R) -> CliResult<Vec<KldRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<KldRow>, _>>()
        .map_err(|e| CliError::data(format!("kld report: {e}")))
}
