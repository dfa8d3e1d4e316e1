//! Kronecker-product space-time interactions (types I to IV).
//!
//! The interaction vector is stored time-fastest: entry `j * n_time + i`
//! holds time point `i` of area `j`, which is the ordering under which the
//! structure is `R_space (x) R_time`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};
use crate::spectral::{SpectralDecomposition, NULL_SPACE_TOL};
use crate::structure::{StructureKind, StructureMatrix};

/// Default guard on `n_time * n_space`.
pub const DEFAULT_MAX_CELLS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractionType {
    I,
    II,
    III,
    IV,
}

impl InteractionType {
    pub const ALL: [InteractionType; 4] = [Self::I, Self::II, Self::III, Self::IV];

    /// Whether the temporal factor is the random-walk structure.
    pub fn structured_in_time(self) -> bool {
        matches!(self, Self::II | Self::IV)
    }

    /// Whether the spatial factor is the ICAR structure.
    pub fn structured_in_space(self) -> bool {
        matches!(self, Self::III | Self::IV)
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for InteractionType {
    type Err = VpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            "IV" | "4" => Ok(Self::IV),
            other => Err(VpError::Validation(format!("unknown interaction type '{other}'"))),
        }
    }
}

/// Closed-form rank of the interaction structure, with `n_components` connected
/// spatial components (1 for a connected graph).
pub fn interaction_rank(
    kind: InteractionType,
    n_time: usize,
    n_space: usize,
    rw_order: usize,
    n_components: usize,
) -> usize {
    let time = if kind.structured_in_time() { n_time - rw_order } else { n_time };
    let space = if kind.structured_in_space() { n_space - n_components } else { n_space };
    time * space
}

/// Sum-to-zero constraint rows on the interaction for a connected graph.
///
/// Type II constrains each area's time series, type III each time point's
/// spatial field, type IV both (one of the rows is then redundant).
pub fn constraint_rows(kind: InteractionType, n_time: usize, n_space: usize) -> DMatrix<f64> {
    let all = vec![(0..n_space).collect::<Vec<_>>()];
    constraint_rows_for_components(kind, n_time, n_space, &all)
}

fn constraint_rows_for_components(
    kind: InteractionType,
    n_time: usize,
    n_space: usize,
    components: &[Vec<usize>],
) -> DMatrix<f64> {
    let n = n_time * n_space;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    if kind.structured_in_time() {
        for j in 0..n_space {
            let mut r = DVector::zeros(n);
            for i in 0..n_time {
                r[j * n_time + i] = 1.0;
            }
            rows.push(r);
        }
    }
    if kind.structured_in_space() {
        for comp in components {
            for i in 0..n_time {
                let mut r = DVector::zeros(n);
                for &j in comp {
                    r[j * n_time + i] = 1.0;
                }
                rows.push(r);
            }
        }
    }
    let mut m = DMatrix::zeros(rows.len(), n);
    for (k, r) in rows.iter().enumerate() {
        m.set_row(k, &r.transpose());
    }
    m
}

/// Eigenpairs of `R_space (x) R_time` from the eigenpairs of its factors.
///
/// Eigenvector `v_space_j (x) v_time_i` has eigenvalue `l_space_j * l_time_i`
/// and is counted in the row space iff both factor eigenvalues are positive.
#[derive(Debug, Clone)]
pub struct KroneckerSpectrum {
    time: SpectralDecomposition,
    space: SpectralDecomposition,
}

impl KroneckerSpectrum {
    pub fn new(time: SpectralDecomposition, space: SpectralDecomposition) -> Self {
        Self { time, space }
    }

    pub fn n_time(&self) -> usize {
        self.time.order()
    }

    pub fn n_space(&self) -> usize {
        self.space.order()
    }

    pub fn order(&self) -> usize {
        self.n_time() * self.n_space()
    }

    pub fn rank(&self) -> usize {
        self.time.rank() * self.space.rank()
    }

    pub fn time(&self) -> &SpectralDecomposition {
        &self.time
    }

    pub fn space(&self) -> &SpectralDecomposition {
        &self.space
    }

    pub fn log_pdet(&self) -> f64 {
        self.space.rank() as f64 * self.time.log_pdet() + self.time.rank() as f64 * self.space.log_pdet()
    }

    /// Eigencoordinates `V_time^T X V_space` of a time-fastest vector.
    fn coordinates(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let xm = DMatrix::from_column_slice(self.n_time(), self.n_space(), x.as_slice());
        self.time.eigenvectors().transpose() * xm * self.space.eigenvectors()
    }

    fn from_coordinates(&self, c: &DMatrix<f64>) -> DVector<f64> {
        let xm = self.time.eigenvectors() * c * self.space.eigenvectors().transpose();
        DVector::from_column_slice(xm.as_slice())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let (rt, rs) = (self.time.rank(), self.space.rank());
        let mut c = DMatrix::zeros(self.n_time(), self.n_space());
        let lt = self.time.eigenvalues();
        let ls = self.space.eigenvalues();
        for j in 0..rs {
            for i in 0..rt {
                let z: f64 = rng.sample(StandardNormal);
                c[(i, j)] = z / (lt[i] * ls[j]).sqrt();
            }
        }
        self.from_coordinates(&c)
    }

    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let c = self.coordinates(x);
        let lt = self.time.eigenvalues();
        let ls = self.space.eigenvalues();
        let mut q = 0.0;
        for j in 0..self.space.rank() {
            for i in 0..self.time.rank() {
                q += lt[i] * ls[j] * c[(i, j)] * c[(i, j)];
            }
        }
        q
    }

    pub fn null_residual(&self, x: &DVector<f64>) -> f64 {
        let c = self.coordinates(x);
        let (rt, rs) = (self.time.rank(), self.space.rank());
        let mut worst: f64 = 0.0;
        for j in 0..self.n_space() {
            for i in 0..self.n_time() {
                if i >= rt || j >= rs {
                    worst = worst.max(c[(i, j)].abs());
                }
            }
        }
        worst
    }

    pub fn project_to_row_space(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut c = self.coordinates(x);
        let (rt, rs) = (self.time.rank(), self.space.rank());
        for j in 0..self.n_space() {
            for i in 0..self.n_time() {
                if i >= rt || j >= rs {
                    c[(i, j)] = 0.0;
                }
            }
        }
        self.from_coordinates(&c)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let residual = self.null_residual(x);
        let tolerance = NULL_SPACE_TOL * x.norm().max(1.0);
        if residual > tolerance {
            return Err(VpError::ConstraintViolation { residual, tolerance });
        }
        let rank = self.rank() as f64;
        Ok(-0.5 * rank * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.log_pdet() - 0.5 * self.quadratic_form(x))
    }

    /// Dense eigendecomposition of the full Kronecker product.
    pub fn to_dense(&self) -> SpectralDecomposition {
        let vt = self.time.eigenvectors();
        let vs = self.space.eigenvectors();
        let values = DVector::from_fn(self.order(), |k, _| {
            let (j, i) = (k / self.n_time(), k % self.n_time());
            let pos = i < self.time.rank() && j < self.space.rank();
            if pos {
                self.time.eigenvalues()[i] * self.space.eigenvalues()[j]
            } else {
                0.0
            }
        });
        SpectralDecomposition::from_parts(values, vs.kronecker(vt))
    }
}

/// A Kronecker interaction built from scaled temporal and spatial structures.
#[derive(Debug, Clone)]
pub struct InteractionModel {
    kind: InteractionType,
    time_factor: StructureMatrix,
    space_factor: StructureMatrix,
    constraints: DMatrix<f64>,
    theoretical_rank: usize,
    spectrum: KroneckerSpectrum,
}

impl InteractionModel {
    pub fn kind(&self) -> InteractionType {
        self.kind
    }

    pub fn n_time(&self) -> usize {
        self.time_factor.order()
    }

    pub fn n_space(&self) -> usize {
        self.space_factor.order()
    }

    pub fn order(&self) -> usize {
        self.n_time() * self.n_space()
    }

    /// The dense `R_space (x) R_time`, assembled on demand.
    pub fn structure(&self) -> StructureMatrix {
        StructureMatrix::kronecker(&self.space_factor, &self.time_factor)
    }

    /// Constraint rows, one per row of the returned matrix.
    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    pub fn theoretical_rank(&self) -> usize {
        self.theoretical_rank
    }

    pub fn spectrum(&self) -> &KroneckerSpectrum {
        &self.spectrum
    }

    /// Null directions of the structure not covered by the sum-to-zero
    /// constraints. Nonzero for RW2-based types II and IV (per-area linear
    /// trends), which the sampler also confines.
    pub fn unconstrained_null_directions(&self) -> usize {
        let null_dim = self.order() - self.spectrum.rank();
        let constraint_rank = if self.constraints.nrows() == 0 {
            0
        } else {
            let gram = &self.constraints * self.constraints.transpose();
            crate::spectral::spectral(&gram).map(|s| s.rank()).unwrap_or(0)
        };
        null_dim.saturating_sub(constraint_rank)
    }
}

/// Assembles interaction `kind` from a scaled RW structure (time) and a
/// scaled ICAR structure (space). Identity factors are built internally.
pub fn build_interaction(
    kind: InteractionType,
    time: &StructureMatrix,
    space: &StructureMatrix,
) -> Result<InteractionModel> {
    build_interaction_capped(kind, time, space, DEFAULT_MAX_CELLS)
}

pub fn build_interaction_capped(
    kind: InteractionType,
    time: &StructureMatrix,
    space: &StructureMatrix,
    max_cells: usize,
) -> Result<InteractionModel> {
    let rw_order = match time.kind() {
        StructureKind::Rw1 => 1,
        StructureKind::Rw2 => 2,
        other => {
            return Err(VpError::Validation(format!(
                "temporal factor must be a random walk, got {other:?}"
            )))
        }
    };
    if space.kind() != StructureKind::Icar {
        return Err(VpError::Validation(format!(
            "spatial factor must be ICAR, got {:?}",
            space.kind()
        )));
    }
    if !time.is_scaled() || !space.is_scaled() {
        return Err(VpError::Validation(
            "interaction factors must be scaled to unit generalized variance".into(),
        ));
    }
    let (n_time, n_space) = (time.order(), space.order());
    let cells = n_time
        .checked_mul(n_space)
        .ok_or_else(|| VpError::Size("interaction dimension overflows".into()))?;
    if cells > max_cells {
        return Err(VpError::Size(format!(
            "interaction has {cells} cells, above the cap of {max_cells}"
        )));
    }
    let time_factor = if kind.structured_in_time() {
        time.clone()
    } else {
        StructureMatrix::identity(n_time)
    };
    let space_factor = if kind.structured_in_space() {
        space.clone()
    } else {
        StructureMatrix::identity(n_space)
    };
    let components = space_components(space);
    let n_components = components.len();
    let spectrum = KroneckerSpectrum::new(time_factor.spectral()?, space_factor.spectral()?);
    let constraints = constraint_rows_for_components(kind, n_time, n_space, &components);
    // Isolated areas add a null direction each to the spatial factor.
    let theoretical_rank = interaction_rank(kind, n_time, n_space, rw_order, n_components);
    Ok(InteractionModel {
        kind,
        time_factor,
        space_factor,
        constraints,
        theoretical_rank,
        spectrum,
    })
}

/// Connected components of the spatial structure's sparsity pattern,
/// including isolated areas.
fn space_components(space: &StructureMatrix) -> Vec<Vec<usize>> {
    let m = space.matrix();
    let n = m.nrows();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut comp = Vec::new();
        while let Some(k) = stack.pop() {
            comp.push(k);
            for l in 0..n {
                if !seen[l] && l != k && m[(k, l)] != 0.0 {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
