//! Structure matrices of intrinsic GMRFs: random walks over time, ICAR over
//! an adjacency graph, identities and Kronecker products, plus generalized
//! variance scaling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};
use crate::graph::AdjacencyGraph;
use crate::spectral::{spectral, SpectralDecomposition, RANK_TOL};

/// Precision of a GV scaling: `GV(scale(R)) = 1` to this tolerance.
pub const SCALE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Rw1,
    Rw2,
    Icar,
    Kronecker,
    Identity,
}

/// A symmetric positive semi-definite structure matrix `R` (precision `tau R`).
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    matrix: DMatrix<f64>,
    kind: StructureKind,
    scaled: bool,
}

impl StructureMatrix {
    pub(crate) fn new(matrix: DMatrix<f64>, kind: StructureKind, scaled: bool) -> Self {
        debug_assert!(matrix.is_square());
        Self { matrix, kind, scaled }
    }

    /// `I_n`; its generalized variance is already 1, so it counts as scaled.
    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), StructureKind::Identity, true)
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn spectral(&self) -> Result<SpectralDecomposition> {
        spectral(&self.matrix)
    }

    /// `R2 (x) R1` for factors of any kind; scaled iff both factors are.
    pub fn kronecker(space: &StructureMatrix, time: &StructureMatrix) -> Self {
        Self::new(
            space.matrix.kronecker(&time.matrix),
            StructureKind::Kronecker,
            space.scaled && time.scaled,
        )
    }
}

/// Random-walk structure of order 1 or 2 over `n` equally spaced time points.
pub fn rw_structure(n: usize, order: usize) -> Result<StructureMatrix> {
    match order {
        1 => {
            if n < 3 {
                return Err(VpError::Size(format!("RW1 needs at least 3 time points, got {n}")));
            }
            let mut r = DMatrix::zeros(n, n);
            for k in 0..n {
                r[(k, k)] = if k == 0 || k == n - 1 { 1.0 } else { 2.0 };
                if k + 1 < n {
                    r[(k, k + 1)] = -1.0;
                    r[(k + 1, k)] = -1.0;
                }
            }
            Ok(StructureMatrix::new(r, StructureKind::Rw1, false))
        }
        2 => {
            if n < 4 {
                return Err(VpError::Size(format!("RW2 needs at least 4 time points, got {n}")));
            }
            let mut d = DMatrix::zeros(n - 2, n);
            for k in 0..n - 2 {
                d[(k, k)] = 1.0;
                d[(k, k + 1)] = -2.0;
                d[(k, k + 2)] = 1.0;
            }
            Ok(StructureMatrix::new(d.transpose() * &d, StructureKind::Rw2, false))
        }
        other => Err(VpError::Validation(format!("random walk order must be 1 or 2, got {other}"))),
    }
}

/// ICAR structure: neighbour counts on the diagonal, -1 between neighbours.
pub fn icar_structure(graph: &AdjacencyGraph) -> Result<StructureMatrix> {
    if graph.n_edges() == 0 {
        return Err(VpError::DegenerateStructure("ICAR graph has no edges".into()));
    }
    let n = graph.n_areas();
    let mut r = DMatrix::zeros(n, n);
    for (k, m) in graph.neighbor_counts().into_iter().enumerate() {
        r[(k, k)] = m as f64;
        for &l in graph.neighbors(k) {
            r[(k, l)] = -1.0;
        }
    }
    Ok(StructureMatrix::new(r, StructureKind::Icar, false))
}

/// Geometric mean of the diagonal of the pseudo-inverse.
pub fn generalized_variance(structure: &StructureMatrix) -> Result<f64> {
    gv_of(structure.matrix())
}

fn gv_of(matrix: &DMatrix<f64>) -> Result<f64> {
    let spec = spectral(matrix)?;
    if spec.rank() == 0 {
        return Err(VpError::DegenerateStructure("structure matrix has rank 0".into()));
    }
    let pinv = spec.pseudo_inverse();
    let diag = pinv.diagonal();
    let max = diag.max().max(f64::MIN_POSITIVE);
    let mut log_sum = 0.0;
    for (k, &d) in diag.iter().enumerate() {
        if d <= 1e-12 * max {
            return Err(VpError::DegenerateStructure(format!(
                "pseudo-inverse diagonal entry {} is {d:e}; isolated areas have no generalized variance",
                k + 1
            )));
        }
        log_sum += d.ln();
    }
    Ok((log_sum / diag.len() as f64).exp())
}

/// Blocks of the sparsity pattern of `matrix` (connected components of its
/// off-diagonal nonzeros).
fn pattern_blocks(matrix: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = matrix.nrows();
    let mut seen = vec![false; n];
    let mut blocks = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(k) = stack.pop() {
            members.push(k);
            for l in 0..n {
                if !seen[l] && matrix[(k, l)] != 0.0 {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        members.sort_unstable();
        blocks.push(members);
    }
    blocks
}

/// Returns `GV(R) * R` so that the generalized variance becomes 1.
///
/// Each independent block of `R` (a connected component of the graph for
/// ICAR) is scaled on its own. All-zero blocks, i.e. isolated areas, are left
/// at zero: they carry no structured effect.
pub fn scale_structure(structure: &StructureMatrix) -> Result<StructureMatrix> {
    let matrix = structure.matrix();
    let max = matrix.amax();
    if max == 0.0 {
        return Err(VpError::DegenerateStructure("structure matrix is zero".into()));
    }
    let mut scaled = matrix.clone();
    for block in pattern_blocks(matrix) {
        let sub = matrix.select_rows(&block).select_columns(&block);
        if sub.amax() <= RANK_TOL * max {
            continue;
        }
        let gv = gv_of(&sub)?;
        for &r in &block {
            for &c in &block {
                scaled[(r, c)] = gv * matrix[(r, c)];
            }
        }
    }
    Ok(StructureMatrix::new(scaled, structure.kind(), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gv_rw1_3() -> f64 {
        (50.0_f64 / 729.0).powf(1.0 / 3.0)
    }

    #[test]
    fn rw1_of_three() {
        let r = rw_structure(3, 1).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(r.matrix(), &expected);
        for row in r.matrix().row_iter() {
            assert_eq!(row.sum(), 0.0);
        }
    }

    #[test]
    fn rw2_of_four_matches_difference_product() {
        let d = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        let mut oracle = DMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                oracle[(i, j)] = (0..2).map(|k| d[(k, i)] * d[(k, j)]).sum();
            }
        }
        assert_eq!(rw_structure(4, 2).unwrap().matrix(), &oracle);
    }

    #[test]
    fn rw2_annihilates_linear_trend() {
        let r = rw_structure(7, 2).unwrap();
        let lin = nalgebra::DVector::from_fn(7, |i, _| (i + 1) as f64);
        assert!((r.matrix() * lin).amax() < 1e-12);
    }

    #[test]
    fn size_errors() {
        assert!(matches!(rw_structure(2, 1), Err(VpError::Size(_))));
        assert!(matches!(rw_structure(3, 2), Err(VpError::Size(_))));
        assert!(matches!(rw_structure(5, 3), Err(VpError::Validation(_))));
    }

    #[test]
    fn icar_path_equals_rw1() {
        let g = AdjacencyGraph::path(3).unwrap();
        assert_eq!(icar_structure(&g).unwrap().matrix(), rw_structure(3, 1).unwrap().matrix());
    }

    #[test]
    fn icar_four_cycle_rank_three() {
        let g = AdjacencyGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let r = icar_structure(&g).unwrap();
        assert!(r.matrix().diagonal().iter().all(|&d| d == 2.0));
        assert_eq!(r.matrix()[(0, 3)], -1.0);
        assert_eq!(r.matrix()[(0, 2)], 0.0);
        assert_eq!(r.spectral().unwrap().rank(), 3);
    }

    #[test]
    fn icar_two_disjoint_edges_rank_two() {
        let g = AdjacencyGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(icar_structure(&g).unwrap().spectral().unwrap().rank(), 2);
    }

    #[test]
    fn icar_without_edges_is_degenerate() {
        let g = AdjacencyGraph::from_edges(3, &[]).unwrap();
        assert!(matches!(icar_structure(&g), Err(VpError::DegenerateStructure(_))));
    }

    #[test]
    fn gv_of_rw1_three() {
        let gv = generalized_variance(&rw_structure(3, 1).unwrap()).unwrap();
        assert_abs_diff_eq!(gv, gv_rw1_3(), epsilon = 1e-12);
    }

    #[test]
    fn gv_identity_and_doubling() {
        for n in [1, 4, 9] {
            let gv = generalized_variance(&StructureMatrix::identity(n)).unwrap();
            assert_abs_diff_eq!(gv, 1.0, epsilon = 1e-14);
        }
        let r = rw_structure(6, 2).unwrap();
        let doubled = StructureMatrix::new(r.matrix() * 2.0, r.kind(), false);
        let ratio = generalized_variance(&doubled).unwrap() / generalized_variance(&r).unwrap();
        assert_abs_diff_eq!(ratio, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn scaling_rw1_three() {
        let r = rw_structure(3, 1).unwrap();
        let s = scale_structure(&r).unwrap();
        assert!(s.is_scaled());
        assert_abs_diff_eq!(s.matrix()[(1, 1)], 2.0 * gv_rw1_3(), epsilon = 1e-12);
        assert_abs_diff_eq!(generalized_variance(&s).unwrap(), 1.0, epsilon = SCALE_TOL);
        let again = scale_structure(&s).unwrap();
        assert!((again.matrix() - s.matrix()).amax() < 1e-12);
    }

    #[test]
    fn disjoint_paths_scaled_per_block() {
        let g = AdjacencyGraph::from_edges(6, &[(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
        let s = scale_structure(&icar_structure(&g).unwrap()).unwrap();
        let block = rw_structure(3, 1).unwrap().matrix() * gv_rw1_3();
        for (off, _) in [(0, ()), (3, ())] {
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(s.matrix()[(off + i, off + j)], block[(i, j)], epsilon = 1e-12);
                }
            }
        }
        assert_abs_diff_eq!(generalized_variance(&s).unwrap(), 1.0, epsilon = SCALE_TOL);
    }

    #[test]
    fn singleton_areas_stay_zero() {
        let g = AdjacencyGraph::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let r = icar_structure(&g).unwrap();
        assert!(matches!(generalized_variance(&r), Err(VpError::DegenerateStructure(_))));
        let s = scale_structure(&r).unwrap();
        assert!(s.matrix().row(3).iter().all(|&v| v == 0.0));
        assert_abs_diff_eq!(s.matrix()[(0, 0)], gv_rw1_3(), epsilon = 1e-12);
    }
}
