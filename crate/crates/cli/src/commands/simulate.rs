use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vpmap_core::inference::summary::{mean, variance, Interval};
use vpmap_core::inference::{run_mcmc, split_rhat, HyperName, McmcConfig};
use vpmap_core::model::{prior_effects, simulate_dataset, EffectsSource, Family, LatentField, ModelSpec, VpModel};
use vpmap_core::priors::{PriorSpec, TauPcPrior};
use vpmap_core::{AdjacencyGraph, InteractionType};

use crate::config::{resolve, Command, SimulateSection};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::scenario::{PriorChoice, Scenario, ScenarioSpec, SizeLevel};
use crate::Invocation;

/// Lattice, time span, populations and baseline of the synthetic problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub n_time: usize,
    pub rows: usize,
    pub cols: usize,
    pub base_population: f64,
    pub intercept: f64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self::from_section(&SimulateSection::default())
    }
}

impl SimulationDesign {
    pub fn from_section(s: &SimulateSection) -> Self {
        Self {
            n_time: s.n_time,
            rows: s.lattice_rows,
            cols: s.lattice_cols,
            base_population: s.base_population,
            intercept: s.intercept,
        }
    }

    pub fn n_space(&self) -> usize {
        self.rows * self.cols
    }

    /// Binomial model with RW1 time, ICAR space on the rook lattice and a
    /// type IV interaction.
    pub fn model(&self) -> CliResult<VpModel> {
        let graph = AdjacencyGraph::lattice(self.rows, self.cols)?;
        let spec = ModelSpec::new(Family::Binomial, 1, InteractionType::IV, false, self.n_time, graph)?;
        Ok(VpModel::new(spec)?)
    }

    /// Per-cell populations: area `j` gets `base * (0.5 + j / (n2 - 1))`,
    /// scaled by the size level and constant over time.
    pub fn populations(&self, size: SizeLevel) -> Vec<f64> {
        let n2 = self.n_space();
        let mut out = Vec::with_capacity(self.n_time * n2);
        for j in 0..n2 {
            let share = if n2 > 1 { 0.5 + j as f64 / (n2 - 1) as f64 } else { 1.0 };
            let pop = (self.base_population * share * size.factor()).round().max(1.0);
            out.extend(std::iter::repeat_n(pop, self.n_time));
        }
        out
    }
}

/// Mixes `parts` into `seed` (splitmix64 finaliser per step).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const BASE_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const MCMC_STREAM: u64 = 2;

/// Prior draw of the base effects, standardized block by block.
pub fn draw_base_effects(model: &VpModel, intercept: f64, seed: u64) -> LatentField {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[BASE_STREAM]));
    prior_effects(model, intercept, true, &mut rng)
}

#[derive(Debug, Deserialize)]
struct EffectRow {
    block: String,
    index: usize,
    value: f64,
}

/// Reads base effects from CSV `block,index,value` (blocks `beta1`,
/// `beta2`, `delta`, optionally `alpha`). Missing entries are zero.
pub fn read_base_effects(path: &Path, model: &VpModel, intercept: f64) -> CliResult<LatentField> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut x = model.zero_field();
    x.alpha.fill(intercept);
    let ctx = |m: String| CliError::data(format!("{}: {m}", path.display()));
    for (k, row) in csv::Reader::from_reader(BufReader::new(f)).deserialize::<EffectRow>().enumerate() {
        let row = row.map_err(|e| ctx(e.to_string()))?;
        let target = match row.block.as_str() {
            "alpha" => &mut x.alpha,
            "beta1" => &mut x.beta1,
            "beta2" => &mut x.beta2,
            "delta" => &mut x.delta,
            other => return Err(ctx(format!("row {}: unknown block '{other}'", k + 2))),
        };
        if row.index >= target.len() {
            return Err(ctx(format!("row {}: index {} out of range for {}", k + 2, row.index, row.block)));
        }
        target[row.index] = row.value;
    }
    model.validate_field(&x).map_err(|e| CliError::from(e).with_context(path.display()))?;
    Ok(x)
}

/// Posterior summary of one simulated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario: Scenario,
    pub size: SizeLevel,
    pub prior: PriorChoice,
    pub replicate: usize,
    pub true_gamma: f64,
    pub gamma_mean: f64,
    pub gamma_q025: f64,
    pub gamma_q975: f64,
    pub phi_mean: f64,
    pub tau_mean: f64,
    pub rhat_gamma: Option<f64>,
    pub data_seed: u64,
    pub mcmc_seed: u64,
}

/// Shared inputs of a simulation study.
#[derive(Debug, Clone)]
pub struct Study {
    pub design: SimulationDesign,
    pub model: VpModel,
    pub base: LatentField,
    pub tau_prior: TauPcPrior,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Study {
    /// Study with base effects drawn from the prior under `seed`.
    pub fn new(design: SimulationDesign, tau_prior: TauPcPrior, mcmc: McmcConfig, seed: u64) -> CliResult<Self> {
        let model = design.model()?;
        let base = draw_base_effects(&model, design.intercept, seed);
        Ok(Self {
            design,
            model,
            base,
            tau_prior,
            mcmc,
            seed,
        })
    }

    pub fn data_seed(&self, spec: &ScenarioSpec, replicate: usize) -> u64 {
        derive_seed(
            self.seed,
            &[DATA_STREAM, spec.scenario.index(), spec.size_level.index(), replicate as u64],
        )
    }

    pub fn mcmc_seed(&self, spec: &ScenarioSpec, replicate: usize) -> u64 {
        derive_seed(
            self.seed,
            &[MCMC_STREAM, spec.scenario.index(), spec.size_level.index(), replicate as u64],
        )
    }

    /// Simulates one dataset and fits it.
    pub fn replicate(&self, spec: &ScenarioSpec, replicate: usize) -> CliResult<ReplicateResult> {
        let data_seed = self.data_seed(spec, replicate);
        let mcmc_seed = self.mcmc_seed(spec, replicate);
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let pops = self.design.populations(spec.size_level);
        let (data, _) = simulate_dataset(
            &spec.hyperparameters(),
            &EffectsSource::Given(self.base.clone()),
            &pops,
            &self.model,
            &mut rng,
        )?;
        let priors = PriorSpec::new(self.tau_prior, spec.prior_choice.mixing_prior()?);
        let cfg = McmcConfig {
            seed: mcmc_seed,
            jobs: 1,
            ..self.mcmc.clone()
        };
        let draws = run_mcmc(&data, &self.model, &priors, &cfg)?;
        let gamma = draws.pooled(HyperName::Gamma).expect("gamma draws");
        let phi = draws.pooled(HyperName::Phi).expect("phi draws");
        let tau = draws.pooled(HyperName::Tau).expect("tau draws");
        let gi = Interval::of(&gamma)?;
        let rhat_gamma = if draws.chains.len() > 1 {
            draws.per_chain(HyperName::Gamma).and_then(|c| split_rhat(&c).ok())
        } else {
            None
        };
        Ok(ReplicateResult {
            scenario: spec.scenario,
            size: spec.size_level,
            prior: spec.prior_choice,
            replicate,
            true_gamma: spec.scenario.gamma(),
            gamma_mean: mean(&gamma),
            gamma_q025: gi.lower,
            gamma_q975: gi.upper,
            phi_mean: mean(&phi),
            tau_mean: mean(&tau),
            rhat_gamma,
            data_seed,
            mcmc_seed,
        })
    }

    /// Runs every replicate of every cell on up to `jobs` worker threads.
    /// Results come back in grid order whatever the scheduling.
    pub fn run(&self, cells: &[ScenarioSpec], jobs: usize) -> CliResult<Vec<ReplicateResult>> {
        let tasks: Vec<(ScenarioSpec, usize)> = cells
            .iter()
            .flat_map(|c| (0..c.replicates).map(move |r| (*c, r)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::numerical(format!("thread pool: {e}")))?;
        pool.install(|| {
            tasks
                .par_iter()
                .map(|(spec, r)| {
                    log::debug!("{} {} {} replicate {r}", spec.scenario, spec.size_level, spec.prior_choice);
                    self.replicate(spec, *r).map_err(|e| {
                        e.with_context(format!(
                            "{} {} {} replicate {r}",
                            spec.scenario, spec.size_level, spec.prior_choice
                        ))
                    })
                })
                .collect()
        })
    }
}

/// Mean and standard deviation of the posterior means in one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub size: SizeLevel,
    pub prior: PriorChoice,
    pub true_gamma: f64,
    pub replicates: usize,
    pub gamma_mean: f64,
    pub gamma_sd: f64,
    pub phi_mean: f64,
    pub phi_sd: f64,
    pub tau_mean: f64,
    pub tau_sd: f64,
}

pub fn summarize(results: &[ReplicateResult]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(Scenario, SizeLevel, PriorChoice), Vec<&ReplicateResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.scenario, r.size, r.prior)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, size, prior), rs)| {
            let col = |f: fn(&ReplicateResult) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let sd = |v: &[f64]| if v.len() > 1 { variance(v).sqrt() } else { 0.0 };
            let (g, p, t) = (col(|r| r.gamma_mean), col(|r| r.phi_mean), col(|r| r.tau_mean));
            CellSummary {
                scenario,
                size,
                prior,
                true_gamma: scenario.gamma(),
                replicates: rs.len(),
                gamma_mean: mean(&g),
                gamma_sd: sd(&g),
                phi_mean: mean(&p),
                phi_sd: sd(&p),
                tau_mean: mean(&t),
                tau_sd: sd(&t),
            }
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::numerical(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::numerical(format!("csv: {e}")))
}

pub fn from_csv<T: serde::de::DeserializeOwned, R: std::io::Read>(reader: R) -> CliResult<Vec<T>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::data(format!("csv: {e}")))
}

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub replicates: Vec<ReplicateResult>,
    pub summary: Vec<CellSummary>,
}

pub fn run(inv: &Invocation) -> CliResult<SimulateReport> {
    let cfg = &inv.config;
    cfg.validate(Command::Simulate)?;
    let s = cfg.simulate.as_ref().expect("validated");
    let mcmc = inv.mcmc_config(Command::Simulate)?;
    let tau_prior = match &cfg.priors {
        Some(p) => TauPcPrior::elicit(p.tau.u, p.tau.a).map_err(crate::error::as_config)?,
        None => PriorSpec::default().tau,
    };
    let design = SimulationDesign::from_section(s);
    let mut study = Study::new(design.clone(), tau_prior, mcmc.clone(), mcmc.seed)?;
    let effects_path = s.base_effects.as_deref().map(|p| resolve(&inv.base_dir, p));
    if let Some(p) = &effects_path {
        study.base = read_base_effects(p, &study.model, design.intercept)?;
    }
    let cells = ScenarioSpec::grid(&s.scenarios, &s.size_levels, &s.priors, s.replicates);
    log::info!("simulating {} cells x {} replicates", cells.len(), s.replicates);
    let replicates = study.run(&cells, mcmc.jobs)?;
    let summary = summarize(&replicates);

    let mut out = OutputDir::create(&inv.output_dir())?;
    out.write("replicates.csv", &to_csv(&replicates)?)?;
    out.write("summary.csv", &to_csv(&summary)?)?;
    let mut manifest = inv.manifest(Command::Simulate, Some(mcmc.seed), mcmc.jobs);
    if let Some(p) = &effects_path {
        manifest.add_input("base_effects", p)?;
    }
    manifest.finish(&mut out)?;
    Ok(SimulateReport { replicates, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn populations_follow_design() {
        let d = SimulationDesign::default();
        let p = d.populations(SizeLevel::Actual);
        assert_eq!(p.len(), 150);
        assert_eq!(p[0], 5000.0);
        assert_eq!(p[149], 15000.0);
        assert_eq!(d.populations(SizeLevel::Smaller)[0], 500.0);
        assert_eq!(d.populations(SizeLevel::Larger)[149], 150000.0);
    }

    #[test]
    fn seeds_ignore_the_prior_choice() {
        let d = SimulationDesign {
            n_time: 4,
            rows: 2,
            cols: 2,
            ..SimulationDesign::default()
        };
        let study = Study::new(d, PriorSpec::default().tau, McmcConfig::default(), 9).unwrap();
        let a = ScenarioSpec {
            scenario: Scenario::SC1,
            size_level: SizeLevel::Smaller,
            prior_choice: PriorChoice::Uniform,
            replicates: 1,
        };
        let b = ScenarioSpec {
            prior_choice: PriorChoice::Pc05,
            ..a
        };
        assert_eq!(study.data_seed(&a, 3), study.data_seed(&b, 3));
        assert_eq!(study.mcmc_seed(&a, 3), study.mcmc_seed(&b, 3));
        assert_ne!(study.data_seed(&a, 3), study.data_seed(&a, 4));
        assert_ne!(study.data_seed(&a, 3), study.mcmc_seed(&a, 3));
    }

    #[test]
    fn base_effects_are_standardized_and_constrained() {
        let d = SimulationDesign::default();
        let model = d.model().unwrap();
        let x = draw_base_effects(&model, -4.0, 1);
        model.validate_field(&x).unwrap();
        let q = model.delta_prior().quadratic_form(&x.delta);
        assert!((q - model.delta_prior().rank() as f64).abs() < 1e-8);
        assert_eq!(x, draw_base_effects(&model, -4.0, 1));
    }

    #[test]
    fn replicates_parallel_match_serial() {
        let d = SimulationDesign {
            n_time: 4,
            rows: 2,
            cols: 2,
            ..SimulationDesign::default()
        };
        let mcmc = McmcConfig {
            n_iterations: 300,
            burn_in: 100,
            thin: 2,
            ..McmcConfig::default()
        };
        let study = Study::new(d, PriorSpec::default().tau, mcmc, 4).unwrap();
        let cells = ScenarioSpec::grid(&[Scenario::SC3], &[SizeLevel::Actual], &[PriorChoice::Pc05], 3);
        let serial = study.run(&cells, 1).unwrap();
        let parallel = study.run(&cells, 3).unwrap();
        assert_eq!(serial, parallel);
        let summary = summarize(&serial);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].replicates, 3);
        let text = to_csv(&serial).unwrap();
        let back: Vec<ReplicateResult> = from_csv(text.as_slice()).unwrap();
        assert_eq!(back, serial);
    }
}
