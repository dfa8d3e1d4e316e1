//! The VP linear predictor, its classic-precision equivalent, likelihoods
//! and the dataset generator.
//!
//! Cells are stored time-fastest: cell `(i, j)` (time `i`, area `j`) sits at
//! `j * n_time + i`.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::{ln_binomial, ln_factorial};

use crate::error::{Result, VpError};
use crate::graph::AdjacencyGraph;
use crate::interaction::{build_interaction, InteractionModel, InteractionType, KroneckerSpectrum};
use crate::spectral::{SpectralDecomposition, NULL_SPACE_TOL};
use crate::structure::{icar_structure, rw_structure, scale_structure, StructureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Binomial,
    Poisson,
}

impl std::str::FromStr for Family {
    type Err = VpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binomial" => Ok(Self::Binomial),
            "poisson" => Ok(Self::Poisson),
            other => Err(VpError::Validation(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub temporal_order: usize,
    pub interaction_type: InteractionType,
    pub include_iid_main: bool,
    pub n_time: usize,
    pub graph: AdjacencyGraph,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        temporal_order: usize,
        interaction_type: InteractionType,
        include_iid_main: bool,
        n_time: usize,
        graph: AdjacencyGraph,
    ) -> Result<Self> {
        if temporal_order != 1 && temporal_order != 2 {
            return Err(VpError::Validation(format!(
                "temporal order must be 1 or 2, got {temporal_order}"
            )));
        }
        Ok(Self {
            family,
            temporal_order,
            interaction_type,
            include_iid_main,
            n_time,
            graph,
        })
    }

    pub fn n_space(&self) -> usize {
        self.graph.n_areas()
    }

    pub fn n_cells(&self) -> usize {
        self.n_time * self.n_space()
    }
}

/// Total precision and mixing proportions. `psi1`/`psi2` are present iff
/// the model has iid main effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tau: f64,
    pub gamma: f64,
    pub phi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi2: Option<f64>,
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(VpError::Validation(format!("{name} = {v} must lie in (0, 1)")))
    }
}

fn closed_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(VpError::Validation(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl Hyperparameters {
    pub fn new(tau: f64, gamma: f64, phi: f64) -> Self {
        Self {
            tau,
            gamma,
            phi,
            psi1: None,
            psi2: None,
        }
    }

    pub fn with_iid(tau: f64, gamma: f64, phi: f64, psi1: f64, psi2: f64) -> Self {
        Self {
            tau,
            gamma,
            phi,
            psi1: Some(psi1),
            psi2: Some(psi2),
        }
    }

    pub fn has_iid(&self) -> bool {
        self.psi1.is_some()
    }

    fn check(&self, include_iid: bool, unit: fn(&str, f64) -> Result<()>) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(VpError::Validation(format!("tau = {} must be positive", self.tau)));
        }
        unit("gamma", self.gamma)?;
        unit("phi", self.phi)?;
        match (include_iid, self.psi1, self.psi2) {
            (true, Some(p1), Some(p2)) => {
                unit("psi1", p1)?;
                unit("psi2", p2)
            }
            (false, None, None) => Ok(()),
            (true, _, _) => Err(VpError::Validation("psi1 and psi2 are required with iid main effects".into())),
            (false, _, _) => Err(VpError::Validation("psi1/psi2 given for a model without iid main effects".into())),
        }
    }

    /// Strict domain check: mixing values in the open unit interval.
    pub fn validate(&self, include_iid: bool) -> Result<()> {
        self.check(include_iid, open_unit)
    }

    /// Allows mixing values at 0 or 1, as used by the data generator.
    pub fn validate_closed(&self, include_iid: bool) -> Result<()> {
        self.check(include_iid, closed_unit)
    }

    pub fn weights(&self) -> BlockWeights {
        let s = self.tau.recip().sqrt();
        let main = s * (1.0 - self.gamma).sqrt();
        let time = main * (1.0 - self.phi).sqrt();
        let space = main * self.phi.sqrt();
        let psi1 = self.psi1.unwrap_or(0.0);
        let psi2 = self.psi2.unwrap_or(0.0);
        BlockWeights {
            beta1: time * (1.0 - psi1).sqrt(),
            eps1: time * psi1.sqrt(),
            beta2: space * (1.0 - psi2).sqrt(),
            eps2: space * psi2.sqrt(),
            delta: s * self.gamma.sqrt(),
        }
    }
}

/// Coefficients multiplying each latent block in the predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockWeights {
    pub beta1: f64,
    pub eps1: f64,
    pub beta2: f64,
    pub eps2: f64,
    pub delta: f64,
}

impl BlockWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.beta1, self.eps1, self.beta2, self.eps2, self.delta]
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.as_array().iter().map(|w| w * w).sum()
    }
}

/// Precisions of the classic parametrization, relative to the scaled
/// structure matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicPrecisions {
    pub time: f64,
    pub time_iid: Option<f64>,
    pub space: f64,
    pub space_iid: Option<f64>,
    pub interaction: f64,
}

impl ClassicPrecisions {
    pub fn total_variance(&self) -> f64 {
        [Some(self.time), self.time_iid, Some(self.space), self.space_iid, Some(self.interaction)]
            .iter()
            .flatten()
            .map(|p| p.recip())
            .sum()
    }
}

fn precision_of(variance: f64, name: &str) -> Result<f64> {
    if variance > 0.0 {
        Ok(variance.recip())
    } else {
        Err(VpError::Endpoint(format!("{name} has zero variance")))
    }
}

pub fn vp_to_classic(h: &Hyperparameters) -> Result<ClassicPrecisions> {
    h.validate_closed(h.has_iid())?;
    let w = h.weights();
    let iid = h.has_iid();
    Ok(ClassicPrecisions {
        time: precision_of(w.beta1 * w.beta1, "time effect")?,
        time_iid: if iid { Some(precision_of(w.eps1 * w.eps1, "iid time effect")?) } else { None },
        space: precision_of(w.beta2 * w.beta2, "space effect")?,
        space_iid: if iid { Some(precision_of(w.eps2 * w.eps2, "iid space effect")?) } else { None },
        interaction: precision_of(w.delta * w.delta, "interaction")?,
    })
}

pub fn classic_to_vp(c: &ClassicPrecisions) -> Result<Hyperparameters> {
    let all = [Some(c.time), c.time_iid, Some(c.space), c.space_iid, Some(c.interaction)];
    if all.iter().flatten().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(VpError::Validation("classic precisions must be positive and finite".into()));
    }
    if c.time_iid.is_some() != c.space_iid.is_some() {
        return Err(VpError::Validation("iid precisions must be given for both time and space".into()));
    }
    let v_time = c.time.recip() + c.time_iid.map_or(0.0, f64::recip);
    let v_space = c.space.recip() + c.space_iid.map_or(0.0, f64::recip);
    let v_int = c.interaction.recip();
    let total = v_time + v_space + v_int;
    let main = v_time + v_space;
    Ok(Hyperparameters {
        tau: total.recip(),
        gamma: v_int / total,
        phi: v_space / main,
        psi1: c.time_iid.map(|p| p.recip() / v_time),
        psi2: c.space_iid.map(|p| p.recip() / v_space),
    })
}

/// Fixed Gaussian prior of one latent block.
#[derive(Debug, Clone)]
pub enum LatentPrior {
    Dense(SpectralDecomposition),
    Kronecker(KroneckerSpectrum),
    Iid(usize),
}

impl LatentPrior {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(s) => s.order(),
            Self::Kronecker(k) => k.order(),
            Self::Iid(n) => *n,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Self::Dense(s) => s.rank(),
            Self::Kronecker(k) => k.rank(),
            Self::Iid(n) => *n,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Dense(s) => crate::spectral::sample_igmrf(s, rng),
            Self::Kronecker(k) => k.sample(rng),
            Self::Iid(n) => DVector::from_fn(*n, |_, _| rng.sample(StandardNormal)),
        }
    }

    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Dense(s) => s.quadratic_form(x),
            Self::Kronecker(k) => k.quadratic_form(x),
            Self::Iid(_) => x.norm_squared(),
        }
    }

    pub fn null_residual(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Dense(s) => s.null_residual(x),
            Self::Kronecker(k) => k.null_residual(x),
            Self::Iid(_) => 0.0,
        }
    }

    fn check(&self, name: &str, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(VpError::Validation(format!(
                "{name} has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let residual = self.null_residual(x);
        let tolerance = NULL_SPACE_TOL * x.norm().max(1.0);
        if residual > tolerance {
            return Err(VpError::ConstraintViolation { residual, tolerance });
        }
        Ok(())
    }
}

/// Latent effects of the VP model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub alpha: DVector<f64>,
    pub beta1: DVector<f64>,
    pub eps1: Option<DVector<f64>>,
    pub beta2: DVector<f64>,
    pub eps2: Option<DVector<f64>>,
    pub delta: DVector<f64>,
}

/// A model spec with its scaled structures and block priors.
#[derive(Debug, Clone)]
pub struct VpModel {
    spec: ModelSpec,
    time: StructureMatrix,
    space: StructureMatrix,
    interaction: InteractionModel,
    beta1_prior: LatentPrior,
    beta2_prior: LatentPrior,
    delta_prior: LatentPrior,
    intercept_of: Vec<usize>,
    n_intercepts: usize,
}

impl VpModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let time = scale_structure(&rw_structure(spec.n_time, spec.temporal_order)?)?;
        let space = scale_structure(&icar_structure(&spec.graph)?)?;
        let interaction = build_interaction(spec.interaction_type, &time, &space)?;
        let beta1_prior = LatentPrior::Dense(time.spectral()?);
        let beta2_prior = LatentPrior::Dense(space.spectral()?);
        let delta_prior = LatentPrior::Kronecker(interaction.spectrum().clone());
        // one intercept per component with more than one area, plus a shared
        // one for singleton areas
        let graph = &spec.graph;
        let mut intercept_of = vec![usize::MAX; graph.n_areas()];
        let mut n_intercepts = 0;
        for comp in graph.structured_components() {
            for &a in comp {
                intercept_of[a] = n_intercepts;
            }
            n_intercepts += 1;
        }
        if intercept_of.contains(&usize::MAX) {
            for slot in intercept_of.iter_mut().filter(|s| **s == usize::MAX) {
                *slot = n_intercepts;
            }
            n_intercepts += 1;
        }
        Ok(Self {
            spec,
            time,
            space,
            interaction,
            beta1_prior,
            beta2_prior,
            delta_prior,
            intercept_of,
            n_intercepts,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_time(&self) -> usize {
        self.spec.n_time
    }

    pub fn n_space(&self) -> usize {
        self.spec.n_space()
    }

    pub fn n_cells(&self) -> usize {
        self.spec.n_cells()
    }

    pub fn time_structure(&self) -> &StructureMatrix {
        &self.time
    }

    pub fn space_structure(&self) -> &StructureMatrix {
        &self.space
    }

    pub fn interaction(&self) -> &InteractionModel {
        &self.interaction
    }

    pub fn beta1_prior(&self) -> &LatentPrior {
        &self.beta1_prior
    }

    pub fn beta2_prior(&self) -> &LatentPrior {
        &self.beta2_prior
    }

    pub fn delta_prior(&self) -> &LatentPrior {
        &self.delta_prior
    }

    pub fn n_intercepts(&self) -> usize {
        self.n_intercepts
    }

    /// Intercept index of each area.
    pub fn intercept_of(&self) -> &[usize] {
        &self.intercept_of
    }

    pub fn zero_field(&self) -> LatentField {
        let (n1, n2) = (self.n_time(), self.n_space());
        let iid = self.spec.include_iid_main;
        LatentField {
            alpha: DVector::zeros(self.n_intercepts),
            beta1: DVector::zeros(n1),
            eps1: iid.then(|| DVector::zeros(n1)),
            beta2: DVector::zeros(n2),
            eps2: iid.then(|| DVector::zeros(n2)),
            delta: DVector::zeros(n1 * n2),
        }
    }

    /// Checks lengths and constraints of every block.
    pub fn validate_field(&self, x: &LatentField) -> Result<()> {
        if x.alpha.len() != self.n_intercepts {
            return Err(VpError::Validation(format!(
                "expected {} intercepts, got {}",
                self.n_intercepts,
                x.alpha.len()
            )));
        }
        self.beta1_prior.check("beta1", &x.beta1)?;
        self.beta2_prior.check("beta2", &x.beta2)?;
        self.delta_prior.check("delta", &x.delta)?;
        let iid = self.spec.include_iid_main;
        for (name, block, n) in [("eps1", &x.eps1, self.n_time()), ("eps2", &x.eps2, self.n_space())] {
            match (iid, block) {
                (true, Some(v)) if v.len() == n => {}
                (true, Some(v)) => {
                    return Err(VpError::Validation(format!("{name} has length {}, expected {n}", v.len())))
                }
                (true, None) => return Err(VpError::Validation(format!("{name} is required"))),
                (false, Some(_)) => {
                    return Err(VpError::Validation(format!("{name} given for a model without iid main effects")))
                }
                (false, None) => {}
            }
        }
        Ok(())
    }

    /// Predictor without validation.
    pub fn predictor_unchecked(&self, w: &BlockWeights, x: &LatentField) -> DVector<f64> {
        let (n1, n2) = (self.n_time(), self.n_space());
        let mut eta = DVector::zeros(n1 * n2);
        for j in 0..n2 {
            let mut space = x.alpha[self.intercept_of[j]] + w.beta2 * x.beta2[j];
            if let Some(e2) = &x.eps2 {
                space += w.eps2 * e2[j];
            }
            for i in 0..n1 {
                let mut v = space + w.beta1 * x.beta1[i];
                if let Some(e1) = &x.eps1 {
                    v += w.eps1 * e1[i];
                }
                let k = j * n1 + i;
                eta[k] = v + w.delta * x.delta[k];
            }
        }
        eta
    }

    pub fn linear_predictor(&self, h: &Hyperparameters, x: &LatentField) -> Result<DVector<f64>> {
        h.validate_closed(self.spec.include_iid_main)?;
        self.validate_field(x)?;
        Ok(self.predictor_unchecked(&h.weights(), x))
    }

    /// Draws every block from its prior; intercepts are set to `intercept`.
    pub fn sample_field<R: Rng + ?Sized>(&self, intercept: f64, rng: &mut R) -> LatentField {
        let iid = self.spec.include_iid_main;
        let beta1 = self.beta1_prior.sample(rng);
        let eps1 = iid.then(|| LatentPrior::Iid(self.n_time()).sample(rng));
        let beta2 = self.beta2_prior.sample(rng);
        let eps2 = iid.then(|| LatentPrior::Iid(self.n_space()).sample(rng));
        let delta = self.delta_prior.sample(rng);
        LatentField {
            alpha: DVector::from_element(self.n_intercepts, intercept),
            beta1,
            eps1,
            beta2,
            eps2,
            delta,
        }
    }
}

pub fn linear_predictor(h: &Hyperparameters, x: &LatentField, model: &VpModel) -> Result<DVector<f64>> {
    model.linear_predictor(h, x)
}

/// Observed counts and exposures on the complete time-by-area grid.
/// Cells without an observation have `y = None` and add nothing to the
/// likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_time: usize,
    n_space: usize,
    y: Vec<Option<u64>>,
    exposure: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    time: usize,
    area: usize,
    y: String,
    exposure: f64,
}

impl Dataset {
    pub fn new(n_time: usize, n_space: usize, y: Vec<Option<u64>>, exposure: Vec<f64>) -> Result<Self> {
        let n = n_time * n_space;
        if y.len() != n || exposure.len() != n {
            return Err(VpError::Validation(format!(
                "expected {n} cells, got {} counts and {} exposures",
                y.len(),
                exposure.len()
            )));
        }
        if let Some(k) = exposure.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(VpError::Validation(format!("exposure of cell {k} must be finite and nonnegative")));
        }
        Ok(Self {
            n_time,
            n_space,
            y,
            exposure,
        })
    }

    /// A grid with no observations.
    pub fn empty(n_time: usize, n_space: usize, exposure: Vec<f64>) -> Result<Self> {
        Self::new(n_time, n_space, vec![None; n_time * n_space], exposure)
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn n_cells(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[Option<u64>] {
        &self.y
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    pub fn n_observed(&self) -> usize {
        self.y.iter().flatten().count()
    }

    pub fn index(&self, time: usize, area: usize) -> usize {
        area * self.n_time + time
    }

    /// Family-specific checks: binomial trials must be whole numbers that
    /// bound the counts.
    pub fn validate_for(&self, family: Family) -> Result<()> {
        if family == Family::Binomial {
            for (k, (y, n)) in self.y.iter().zip(&self.exposure).enumerate() {
                if n.fract() != 0.0 {
                    return Err(VpError::Validation(format!("binomial trials {n} of cell {k} are not whole")));
                }
                if let Some(y) = y {
                    if *y as f64 > *n {
                        let (i, j) = (k % self.n_time + 1, k / self.n_time + 1);
                        return Err(VpError::Validation(format!(
                            "count {y} exceeds population {n} at time {i}, area {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads `time,area,y,exposure` rows with 1-based indices in any order.
    /// `y` may be empty or `NA`; absent cells are missing with exposure 0.
    pub fn read_csv<R: Read>(reader: R, n_time: usize, n_space: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| VpError::Parse { line: 1, message: e.to_string() })?
            .clone();
        let expected = ["time", "area", "y", "exposure"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(VpError::Parse {
                line: 1,
                message: format!("expected header 'time,area,y,exposure', got '{}'", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let n = n_time * n_space;
        let mut y = vec![None; n];
        let mut exposure = vec![0.0; n];
        let mut seen = vec![false; n];
        for record in rdr.deserialize::<CsvRow>() {
            let record = record.map_err(|e| VpError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            if record.time == 0 || record.time > n_time || record.area == 0 || record.area > n_space {
                return Err(VpError::Validation(format!(
                    "cell (time {}, area {}) outside the {n_time} x {n_space} grid",
                    record.time, record.area
                )));
            }
            let k = (record.area - 1) * n_time + record.time - 1;
            if seen[k] {
                return Err(VpError::Validation(format!(
                    "duplicate row for time {}, area {}",
                    record.time, record.area
                )));
            }
            seen[k] = true;
            y[k] = match record.y.as_str() {
                "" | "NA" => None,
                s => Some(s.parse::<u64>().map_err(|_| {
                    VpError::Validation(format!(
                        "count '{s}' at time {}, area {} is not a nonnegative integer",
                        record.time, record.area
                    ))
                })?),
            };
            exposure[k] = record.exposure;
        }
        Self::new(n_time, n_space, y, exposure)
    }

    /// Writes every cell, time-fastest, with full-precision exposures.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| VpError::Validation(format!("writing dataset: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "area", "y", "exposure"]).map_err(io)?;
        for j in 0..self.n_space {
            for i in 0..self.n_time {
                let k = self.index(i, j);
                let y = self.y[k].map_or_else(|| "NA".to_string(), |v| v.to_string());
                w.write_record([(i + 1).to_string(), (j + 1).to_string(), y, format!("{:?}", self.exposure[k])])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| VpError::Validation(format!("writing dataset: {e}")))?;
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Observed cells with their normalizing constants, for repeated
/// likelihood evaluation.
#[derive(Debug, Clone)]
pub struct CellLikelihood {
    family: Family,
    n_cells: usize,
    index: Vec<usize>,
    y: Vec<f64>,
    exposure: Vec<f64>,
    log_exposure: Vec<f64>,
    constant: Vec<f64>,
}

impl CellLikelihood {
    pub fn new(data: &Dataset, family: Family) -> Result<Self> {
        data.validate_for(family)?;
        let mut out = Self {
            family,
            n_cells: data.n_cells(),
            index: Vec::new(),
            y: Vec::new(),
            exposure: Vec::new(),
            log_exposure: Vec::new(),
            constant: Vec::new(),
        };
        for (k, y) in data.y.iter().enumerate() {
            let Some(y) = *y else { continue };
            let e = data.exposure[k];
            let constant = match family {
                Family::Binomial => ln_binomial(e as u64, y),
                Family::Poisson => {
                    if e <= 0.0 && y > 0 {
                        return Err(VpError::Validation(format!("positive count with zero expected count in cell {k}")));
                    }
                    -ln_factorial(y)
                }
            };
            out.index.push(k);
            out.y.push(y as f64);
            out.exposure.push(e);
            out.log_exposure.push(if e > 0.0 { e.ln() } else { 0.0 });
            out.constant.push(constant);
        }
        Ok(out)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_observed(&self) -> usize {
        self.index.len()
    }

    fn term(&self, c: usize, eta: f64) -> f64 {
        let (y, e) = (self.y[c], self.exposure[c]);
        match self.family {
            Family::Binomial => self.constant[c] + y * eta - e * softplus(eta),
            Family::Poisson => {
                let rate = if e > 0.0 { e * eta.exp() } else { 0.0 };
                let lin = if y > 0.0 { y * (self.log_exposure[c] + eta) } else { 0.0 };
                self.constant[c] + lin - rate
            }
        }
    }

    pub fn log_likelihood(&self, eta: &[f64]) -> f64 {
        (0..self.index.len()).map(|c| self.term(c, eta[self.index[c]])).sum()
    }

    /// Per-cell contributions over the full grid (0 for missing cells).
    pub fn pointwise(&self, eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells];
        for c in 0..self.index.len() {
            out[self.index[c]] = self.term(c, eta[self.index[c]]);
        }
        out
    }

    /// Contributions of observed cells only, in cell order.
    pub fn observed_pointwise(&self, eta: &[f64]) -> Vec<f64> {
        (0..self.index.len()).map(|c| self.term(c, eta[self.index[c]])).collect()
    }
}

pub fn log_likelihood(data: &Dataset, eta: &DVector<f64>, family: Family) -> Result<f64> {
    if eta.len() != data.n_cells() {
        return Err(VpError::Validation(format!(
            "predictor of length {} for {} cells",
            eta.len(),
            data.n_cells()
        )));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(VpError::Numerical("non-finite linear predictor".into()));
    }
    Ok(CellLikelihood::new(data, family)?.log_likelihood(eta.as_slice()))
}

/// Where the generator takes its latent effects from.
#[derive(Debug, Clone)]
pub enum EffectsSource {
    Given(LatentField),
    /// Fresh prior draws; with `standardize`, each block is rescaled so its
    /// prior quadratic form equals its rank.
    Prior { intercept: f64, standardize: bool },
}

/// Rescales `v` so that its prior quadratic form equals the block rank,
/// the value expected under the prior.
fn standardize(v: &mut DVector<f64>, prior: &LatentPrior) {
    let q = prior.quadratic_form(v);
    if q > 0.0 {
        *v *= (prior.rank() as f64 / q).sqrt();
    }
}

/// Draws every latent block from its prior, optionally standardized.
pub fn prior_effects<R: Rng + ?Sized>(model: &VpModel, intercept: f64, standardize_blocks: bool, rng: &mut R) -> LatentField {
    let mut x = model.sample_field(intercept, rng);
    if standardize_blocks {
        standardize(&mut x.beta1, model.beta1_prior());
        standardize(&mut x.beta2, model.beta2_prior());
        standardize(&mut x.delta, model.delta_prior());
        if let Some(e) = x.eps1.as_mut() {
            standardize(e, &LatentPrior::Iid(model.n_time()));
        }
        if let Some(e) = x.eps2.as_mut() {
            standardize(e, &LatentPrior::Iid(model.n_space()));
        }
    }
    x
}

/// Simulates counts for every cell given per-cell exposures.
pub fn simulate_dataset<R: Rng + ?Sized>(
    h: &Hyperparameters,
    effects: &EffectsSource,
    exposure: &[f64],
    model: &VpModel,
    rng: &mut R,
) -> Result<(Dataset, LatentField)> {
    if exposure.len() != model.n_cells() {
        return Err(VpError::Validation(format!(
            "{} exposures for {} cells",
            exposure.len(),
            model.n_cells()
        )));
    }
    if exposure.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(VpError::Validation("exposures must be positive".into()));
    }
    let family = model.spec().family;
    if family == Family::Binomial && exposure.iter().any(|e| e.fract() != 0.0) {
        return Err(VpError::Validation("binomial populations must be whole numbers".into()));
    }
    let field = match effects {
        EffectsSource::Given(x) => x.clone(),
        EffectsSource::Prior { intercept, standardize } => prior_effects(model, *intercept, *standardize, rng),
    };
    let eta = model.linear_predictor(h, &field)?;
    let mut y = Vec::with_capacity(eta.len());
    for (k, &e) in eta.iter().enumerate() {
        let count = match family {
            Family::Binomial => {
                let p = 1.0 / (1.0 + (-e).exp());
                Binomial::new(exposure[k] as u64, p)
                    .map_err(|err| VpError::Numerical(format!("binomial draw in cell {k}: {err}")))?
                    .sample(rng)
            }
            Family::Poisson => {
                let mean = exposure[k] * e.exp();
                Poisson::new(mean)
                    .map_err(|err| VpError::Numerical(format!("poisson draw in cell {k}: {err}")))?
                    .sample(rng) as u64
            }
        };
        y.push(Some(count));
    }
    let data = Dataset::new(model.n_time(), model.n_space(), y, exposure.to_vec())?;
    Ok((data, field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: InteractionType, iid: bool) -> ModelSpec {
        ModelSpec::new(Family::Binomial, 1, kind, iid, 5, AdjacencyGraph::lattice(2, 3).unwrap()).unwrap()
    }

    #[test]
    fn zero_latents_give_intercept() {
        let model = VpModel::new(spec(InteractionType::IV, false)).unwrap();
        let mut x = model.zero_field();
        x.alpha[0] = -2.5;
        let eta = model.linear_predictor(&Hyperparameters::new(2.0, 0.3, 0.4), &x).unwrap();
        assert!(eta.iter().all(|&v| v == -2.5));
    }

    #[test]
    fn direct_evaluation() {
        let model = VpModel::new(spec(InteractionType::I, false)).unwrap();
        let mut x = model.zero_field();
        // (1, -1, 0, 0, 0) satisfies the sum-to-zero constraint
        x.beta1[0] = 1.0;
        x.beta1[1] = -1.0;
        let eta = model.linear_predictor(&Hyperparameters::new(1.0, 0.5, 0.5), &x).unwrap();
        for j in 0..model.n_space() {
            assert!((eta[j * 5] - 0.5).abs() < 1e-15);
            assert!((eta[j * 5 + 1] + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn predictor_rejects_constraint_violation() {
        let model = VpModel::new(spec(InteractionType::I, false)).unwrap();
        let mut x = model.zero_field();
        x.beta1[0] = 1.0;
        assert!(matches!(
            model.linear_predictor(&Hyperparameters::new(1.0, 0.5, 0.5), &x),
            Err(VpError::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn main_weight_near_gamma_one() {
        let w = Hyperparameters::new(1.0, 0.9999, 0.5).weights();
        let main = (w.beta1 * w.beta1 + w.beta2 * w.beta2).sqrt();
        assert!((main - 0.01).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_total_variance() {
        let h = Hyperparameters::with_iid(2.5, 0.2, 0.7, 0.3, 0.6);
        assert!((h.weights().sum_of_squares() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn classic_example() {
        let c = vp_to_classic(&Hyperparameters::new(1.0, 0.5, 0.5)).unwrap();
        assert!((c.time - 4.0).abs() < 1e-12);
        assert!((c.space - 4.0).abs() < 1e-12);
        assert!((c.interaction - 2.0).abs() < 1e-12);
        assert!((c.total_variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classic_endpoint_error() {
        assert!(matches!(
            vp_to_classic(&Hyperparameters::new(1.0, 0.0, 0.5)),
            Err(VpError::Endpoint(_))
        ));
    }

    #[test]
    fn binomial_half() {
        let data = Dataset::new(1, 1, vec![Some(0)], vec![10.0]).unwrap();
        let ll = log_likelihood(&data, &DVector::from_element(1, 0.0), Family::Binomial).unwrap();
        assert!((ll - 10.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn poisson_zero() {
        let data = Dataset::new(1, 1, vec![Some(0)], vec![1.0]).unwrap();
        let ll = log_likelihood(&data, &DVector::from_element(1, 0.0), Family::Poisson).unwrap();
        assert!((ll + 1.0).abs() < 1e-15);
    }

    #[test]
    fn binomial_far_negative() {
        let data = Dataset::new(1, 1, vec![Some(0)], vec![10.0]).unwrap();
        let ll = log_likelihood(&data, &DVector::from_element(1, -40.0), Family::Binomial).unwrap();
        assert!(ll.is_finite() && ll.abs() < 1e-15);
        let big = log_likelihood(&data, &DVector::from_element(1, 800.0), Family::Binomial).unwrap();
        assert!((big + 8000.0).abs() < 1e-9);
    }

    #[test]
    fn binomial_constants_match_direct_sum() {
        // log C(7, 3) = log 35
        let data = Dataset::new(1, 1, vec![Some(3)], vec![7.0]).unwrap();
        let eta = 0.3f64;
        let p = 1.0 / (1.0 + (-eta).exp());
        let direct = 35f64.ln() + 3.0 * p.ln() + 4.0 * (1.0 - p).ln();
        let ll = log_likelihood(&data, &DVector::from_element(1, eta), Family::Binomial).unwrap();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn binomial_count_above_population() {
        let data = Dataset::new(1, 1, vec![Some(11)], vec![10.0]).unwrap();
        assert!(matches!(
            log_likelihood(&data, &DVector::zeros(1), Family::Binomial),
            Err(VpError::Validation(_))
        ));
    }

    #[test]
    fn missing_cells_contribute_nothing() {
        let data = Dataset::new(1, 2, vec![Some(2), None], vec![10.0, 10.0]).unwrap();
        let single = Dataset::new(1, 1, vec![Some(2)], vec![10.0]).unwrap();
        let a = log_likelihood(&data, &DVector::from_vec(vec![0.2, 5.0]), Family::Binomial).unwrap();
        let b = log_likelihood(&single, &DVector::from_vec(vec![0.2]), Family::Binomial).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let data = Dataset::new(2, 2, vec![Some(1), None, Some(3), Some(0)], vec![10.0, 12.5, 0.1, 7.0]).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), 2, 2).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_any_row_order() {
        let text = "time,area,y,exposure\n2,1,4,10\n1,2,0,3\n1,1,1,10\n2,2,NA,3\n";
        let data = Dataset::read_csv(text.as_bytes(), 2, 2).unwrap();
        assert_eq!(data.y(), &[Some(1), Some(4), Some(0), None]);
    }

    #[test]
    fn csv_errors() {
        let dup = "time,area,y,exposure\n1,1,1,10\n1,1,2,10\n";
        assert!(matches!(Dataset::read_csv(dup.as_bytes(), 1, 1), Err(VpError::Validation(_))));
        let range = "time,area,y,exposure\n3,1,1,10\n";
        assert!(matches!(Dataset::read_csv(range.as_bytes(), 2, 1), Err(VpError::Validation(_))));
        let header = "t,a,y,e\n";
        assert!(matches!(Dataset::read_csv(header.as_bytes(), 1, 1), Err(VpError::Parse { .. })));
        let bad = "time,area,y,exposure\n1,1,1,abc\n";
        assert!(matches!(Dataset::read_csv(bad.as_bytes(), 1, 1), Err(VpError::Parse { line: 2, .. })));
    }

    #[test]
    fn intercepts_per_component() {
        let g = AdjacencyGraph::from_edges(5, &[(0, 1), (2, 3)]).unwrap();
        let s = ModelSpec::new(Family::Poisson, 1, InteractionType::I, true, 3, g).unwrap();
        let model = VpModel::new(s).unwrap();
        assert_eq!(model.n_intercepts(), 3);
        assert_eq!(model.intercept_of(), &[0, 0, 1, 1, 2]);
    }

    #[test]
    fn gamma_zero_removes_interaction() {
        let model = VpModel::new(spec(InteractionType::IV, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Hyperparameters::new(1.0, 0.0, 0.5);
        let src = EffectsSource::Prior { intercept: -1.0, standardize: true };
        let exposure = vec![100.0; model.n_cells()];
        let (_, field) = simulate_dataset(&h, &src, &exposure, &model, &mut rng).unwrap();
        let eta = model.linear_predictor(&h, &field).unwrap();
        let mut without = field.clone();
        without.delta.fill(0.0);
        let eta0 = model.linear_predictor(&h, &without).unwrap();
        assert_eq!(eta, eta0);
        // temporal profile identical across areas
        let n1 = model.n_time();
        for j in 1..model.n_space() {
            for i in 1..n1 {
                let a = eta[j * n1 + i] - eta[j * n1];
                let b = eta[i] - eta[0];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = VpModel::new(spec(InteractionType::IV, false)).unwrap();
        let h = Hyperparameters::new(1.0, 1.0 / 3.0, 0.5);
        let src = EffectsSource::Prior { intercept: -1.0, standardize: false };
        let exposure = vec![50.0; model.n_cells()];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            simulate_dataset(&h, &src, &exposure, &model, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).0, run(6).0);
    }

    #[test]
    fn large_population_rates_converge() {
        let model = VpModel::new(spec(InteractionType::II, false)).unwrap();
        let h = Hyperparameters::new(1.0, 0.3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = model.sample_field(-1.0, &mut rng);
        let src = EffectsSource::Given(field.clone());
        let exposure = vec![1e6; model.n_cells()];
        let (data, _) = simulate_dataset(&h, &src, &exposure, &model, &mut rng).unwrap();
        let eta = model.linear_predictor(&h, &field).unwrap();
        for (k, y) in data.y().iter().enumerate() {
            let mu = 1.0 / (1.0 + (-eta[k]).exp());
            let rate = y.unwrap() as f64 / 1e6;
            assert!((rate / mu - 1.0).abs() < 0.01 || (rate - mu).abs() < 1e-3, "{rate} vs {mu}");
        }
    }
}
