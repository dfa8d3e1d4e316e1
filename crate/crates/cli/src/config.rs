//! Run configuration: a single versioned JSON document. Every section and
//! field is checked before any computation; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpmap_core::inference::McmcConfig;
use vpmap_core::model::Family;
use vpmap_core::priors::{GammaPcPrior, MixingPrior, PriorSpec, TauPcPrior};
use vpmap_core::InteractionType;

use crate::error::{as_config, CliError, CliResult};
use crate::scenario::{PriorChoice, Scenario, SizeLevel};

pub const CONFIG_VERSION: u32 = 1;

/// The JSON Schema describing [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Simulate,
    VerifyPrior,
    Scale,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::VerifyPrior => "verify-prior",
            Command::Scale => "scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<PriorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_prior: Option<VerifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default = "one")]
    pub temporal_order: usize,
    pub interaction_type: InteractionType,
    #[serde(default)]
    pub include_iid_main: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailProbability {
    pub u: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaDecl {
    Pc { u: f64, a: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    /// `P(sd > u) = a` for the total standard deviation.
    pub tau: TailProbability,
    pub gamma: GammaDecl,
}

impl PriorSection {
    pub fn build(&self) -> CliResult<PriorSpec> {
        let tau = TauPcPrior::elicit(self.tau.u, self.tau.a).map_err(as_config)?;
        let gamma = match self.gamma {
            GammaDecl::Pc { u, a } => MixingPrior::Pc(GammaPcPrior::elicit(u, a).map_err(as_config)?),
            GammaDecl::Uniform => MixingPrior::Uniform,
        };
        Ok(PriorSpec::new(tau, gamma))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV with header `time,area,y,exposure`.
    pub counts: String,
    /// Neighbour-list file or `from,to` edge CSV.
    pub graph: String,
    pub n_time: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "all_sizes")]
    pub size_levels: Vec<SizeLevel>,
    #[serde(default = "all_priors")]
    pub priors: Vec<PriorChoice>,
    #[serde(default = "ten")]
    pub replicates: usize,
    #[serde(default = "ten")]
    pub n_time: usize,
    #[serde(default = "three")]
    pub lattice_rows: usize,
    #[serde(default = "five")]
    pub lattice_cols: usize,
    #[serde(default = "base_population")]
    pub base_population: f64,
    #[serde(default = "baseline")]
    pub intercept: f64,
    /// CSV `block,index,value` with blocks beta1, beta2 and delta; drawn
    /// from the prior when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_effects: Option<String>,
}

fn all_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}

fn all_sizes() -> Vec<SizeLevel> {
    SizeLevel::ALL.to_vec()
}

fn all_priors() -> Vec<PriorChoice> {
    PriorChoice::ALL.to_vec()
}

fn ten() -> usize {
    10
}

fn three() -> usize {
    3
}

fn five() -> usize {
    5
}

fn base_population() -> f64 {
    1e4
}

fn baseline() -> f64 {
    -4.0
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            scenarios: all_scenarios(),
            size_levels: all_sizes(),
            priors: all_priors(),
            replicates: ten(),
            n_time: ten(),
            lattice_rows: three(),
            lattice_cols: five(),
            base_population: base_population(),
            intercept: baseline(),
            base_effects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "all_types")]
    pub types: Vec<InteractionType>,
    #[serde(default = "four")]
    pub n_time: usize,
    #[serde(default = "four")]
    pub n_space: usize,
    #[serde(default = "both_orders")]
    pub orders: Vec<usize>,
    /// Run with and/or without iid main effects.
    #[serde(default = "both_iid")]
    pub iid: Vec<bool>,
    #[serde(default = "half")]
    pub phi: f64,
    #[serde(default = "halves")]
    pub psi: [f64; 2],
    #[serde(default = "gamma0")]
    pub gamma0: f64,
    #[serde(default = "grid")]
    pub grid: Vec<f64>,
    /// Spatial graph file; a path over `n_space` areas when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    /// Use the scaled structure matrices (the verification requires it).
    #[serde(default = "yes")]
    pub scaled: bool,
}

fn all_types() -> Vec<InteractionType> {
    InteractionType::ALL.to_vec()
}

fn four() -> usize {
    4
}

fn both_orders() -> Vec<usize> {
    vec![1, 2]
}

fn both_iid() -> Vec<bool> {
    vec![false, true]
}

fn half() -> f64 {
    0.5
}

fn halves() -> [f64; 2] {
    [0.5, 0.5]
}

fn gamma0() -> f64 {
    vpmap_core::kld::DEFAULT_GAMMA0
}

fn grid() -> Vec<f64> {
    vpmap_core::kld::default_grid()
}

fn yes() -> bool {
    true
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            types: all_types(),
            n_time: four(),
            n_space: four(),
            orders: both_orders(),
            iid: both_iid(),
            phi: half(),
            psi: halves(),
            gamma0: gamma0(),
            grid: grid(),
            graph: None,
            scaled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureChoice {
    Rw1,
    Rw2,
    Icar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    pub structure: StructureChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(default)]
    pub dump_matrix: bool,
}

fn unit_open(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::config(format!("{name} = {v} must lie in (0, 1)")))
    }
}

fn nonempty<T>(name: &str, v: &[T]) -> CliResult<()> {
    if v.is_empty() {
        Err(CliError::config(format!("{name} must not be empty")))
    } else {
        Ok(())
    }
}

fn require<'a, T>(section: &'a Option<T>, name: &str, cmd: Command) -> CliResult<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| CliError::config(format!("'{}' needs a '{name}' section", cmd.name())))
}

impl RunConfig {
    /// Parses a JSON document; syntax, type and unknown-key problems are
    /// config errors.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model_section(&self, cmd: Command) -> CliResult<&ModelSection> {
        require(&self.model, "model", cmd)
    }

    pub fn mcmc_section(&self, cmd: Command) -> CliResult<&McmcConfig> {
        require(&self.mcmc, "mcmc", cmd)
    }

    /// Checks that `cmd` has everything it needs with values in range.
    pub fn validate(&self, cmd: Command) -> CliResult<()> {
        match cmd {
            Command::Fit => {
                let m = self.model_section(cmd)?;
                check_model(m)?;
                require(&self.priors, "priors", cmd)?.build()?;
                self.mcmc_section(cmd)?.validate().map_err(as_config)?;
                let d = require(&self.data, "data", cmd)?;
                if d.n_time < 3 {
                    return Err(CliError::config("data.n_time must be at least 3"));
                }
                if m.temporal_order == 2 && d.n_time < 4 {
                    return Err(CliError::config("a second-order random walk needs data.n_time >= 4"));
                }
            }
            Command::Simulate => {
                let s = require(&self.simulate, "simulate", cmd)?;
                self.mcmc_section(cmd)?.validate().map_err(as_config)?;
                if let Some(p) = &self.priors {
                    TauPcPrior::elicit(p.tau.u, p.tau.a).map_err(as_config)?;
                }
                nonempty("simulate.scenarios", &s.scenarios)?;
                nonempty("simulate.size_levels", &s.size_levels)?;
                nonempty("simulate.priors", &s.priors)?;
                if s.replicates == 0 {
                    return Err(CliError::config("simulate.replicates must be positive"));
                }
                if s.n_time < 3 {
                    return Err(CliError::config("simulate.n_time must be at least 3"));
                }
                if s.lattice_rows * s.lattice_cols < 2 {
                    return Err(CliError::config("the simulation lattice needs at least two areas"));
                }
                if !(s.base_population >= 10.0 && s.base_population.is_finite()) {
                    return Err(CliError::config("simulate.base_population must be at least 10"));
                }
                if !s.intercept.is_finite() {
                    return Err(CliError::config("simulate.intercept must be finite"));
                }
            }
            Command::VerifyPrior => {
                let v = require(&self.verify_prior, "verify_prior", cmd)?;
                nonempty("verify_prior.types", &v.types)?;
                nonempty("verify_prior.orders", &v.orders)?;
                nonempty("verify_prior.iid", &v.iid)?;
                if v.orders.iter().any(|o| *o != 1 && *o != 2) {
                    return Err(CliError::config("verify_prior.orders may only contain 1 and 2"));
                }
                unit_open("verify_prior.phi", v.phi)?;
                unit_open("verify_prior.psi[0]", v.psi[0])?;
                unit_open("verify_prior.psi[1]", v.psi[1])?;
                if !(v.gamma0 > 0.0 && v.gamma0 <= 1e-4) {
                    return Err(CliError::config("verify_prior.gamma0 must lie in (0, 1e-4]"));
                }
                nonempty("verify_prior.grid", &v.grid)?;
                for g in &v.grid {
                    if !(*g >= 100.0 * v.gamma0 && *g < 1.0) {
                        return Err(CliError::config(format!(
                            "grid value {g} must lie in [100 * gamma0, 1)"
                        )));
                    }
                }
                if v.n_time < 3 || v.n_space < 2 {
                    return Err(CliError::config("verify_prior needs n_time >= 3 and n_space >= 2"));
                }
            }
            Command::Scale => {
                let s = require(&self.scale, "scale", cmd)?;
                match s.structure {
                    StructureChoice::Icar => {
                        if s.graph.is_none() {
                            return Err(CliError::config("scale.structure 'icar' needs scale.graph"));
                        }
                    }
                    _ => {
                        if s.n.is_none() {
                            return Err(CliError::config("random-walk scaling needs scale.n"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Output directory: the `--out` flag, else `output`, else `vpmap-out`.
    pub fn output_dir(&self, flag: Option<&Path>, base: &Path) -> PathBuf {
        match (flag, &self.output) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(o)) => resolve(base, o),
            (None, None) => PathBuf::from("vpmap-out"),
        }
    }
}

fn check_model(m: &ModelSection) -> CliResult<()> {
    if m.temporal_order != 1 && m.temporal_order != 2 {
        return Err(CliError::config("model.temporal_order must be 1 or 2"));
    }
    Ok(())
}

/// Resolves `p` against the directory holding the config file.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
