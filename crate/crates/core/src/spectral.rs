//! Dense symmetric eigendecompositions of structure matrices, and the
//! intrinsic GMRF sampler and log-density built on them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VpError};

/// Eigenvalues below `RANK_TOL * max eigenvalue` are treated as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Allowed null-space component of a vector, relative to its norm.
pub const NULL_SPACE_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

/// `R = V diag(lambda) V^T` with eigenvalues sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    rank: usize,
}

impl SpectralDecomposition {
    /// Assembles a decomposition from already-orthonormal eigenvectors.
    /// Eigenvalues are sorted and the rank is recomputed.
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Self {
        let n = eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eigenvalues[i]));
        let vectors = DMatrix::from_fn(eigenvectors.nrows(), n, |r, c| eigenvectors[(r, order[c])]);
        let max = values.iter().copied().fold(0.0_f64, f64::max);
        let rank = values.iter().filter(|&&v| v > RANK_TOL * max).count();
        Self {
            eigenvalues: values,
            eigenvectors: vectors,
            rank,
        }
    }

    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn null_dim(&self) -> usize {
        self.order() - self.rank
    }

    /// Eigenvectors spanning the row space (positive eigenvalues).
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.rank).into_owned()
    }

    /// Eigenvectors of the zero eigenvalues.
    pub fn null_basis(&self) -> DMatrix<f64> {
        self.eigenvectors
            .columns(self.rank, self.null_dim())
            .into_owned()
    }

    /// Positive eigenvalues only.
    pub fn positive_eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.eigenvalues.iter().take(self.rank).copied()
    }

    /// `sum log lambda_i` over the positive eigenvalues, the log generalized determinant.
    pub fn log_pdet(&self) -> f64 {
        self.positive_eigenvalues().map(f64::ln).sum()
    }

    /// Moore-Penrose pseudo-inverse `V_r diag(1/lambda) V_r^T`.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let v = self.range_basis();
        let mut scaled = v.clone();
        for (j, lambda) in self.positive_eigenvalues().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / lambda);
        }
        &scaled * v.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, lambda) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*lambda);
        }
        &scaled * self.eigenvectors.transpose()
    }

    /// Largest absolute coordinate of `x` along the null basis.
    pub fn null_residual(&self, x: &DVector<f64>) -> f64 {
        if self.null_dim() == 0 {
            return 0.0;
        }
        (self.null_basis().transpose() * x).amax()
    }

    /// Removes the null-space component of `x`.
    pub fn project_to_row_space(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = self.range_basis();
        &v * (v.transpose() * x)
    }

    /// `x^T R x` evaluated in eigencoordinates.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let coords = self.eigenvectors.transpose() * x;
        coords
            .iter()
            .zip(self.eigenvalues.iter())
            .take(self.rank)
            .map(|(c, l)| l * c * c)
            .sum()
    }
}

/// Eigendecomposition of a symmetric matrix.
pub fn spectral(matrix: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    if !matrix.is_square() {
        return Err(VpError::Validation(format!(
            "expected a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let scale = matrix.amax().max(1.0);
    let asym = (matrix - matrix.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(VpError::Validation(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = matrix.clone().symmetric_eigen();
    Ok(SpectralDecomposition::from_parts(eig.eigenvalues, eig.eigenvectors))
}

/// One draw `x = sum_{lambda_i > 0} z_i / sqrt(lambda_i) v_i`, which lies in
/// the row space and therefore satisfies every null-space constraint.
pub fn sample_igmrf<R: Rng + ?Sized>(spec: &SpectralDecomposition, rng: &mut R) -> DVector<f64> {
    let mut x = DVector::zeros(spec.order());
    for (j, lambda) in spec.positive_eigenvalues().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        x.axpy(z / lambda.sqrt(), &spec.eigenvectors.column(j), 1.0);
    }
    x
}

/// Improper GMRF log-density with generalized determinant:
/// `-(rank/2) log 2pi + (1/2) log|R|* - (1/2) x^T R x`.
pub fn igmrf_logdensity(x: &DVector<f64>, spec: &SpectralDecomposition) -> Result<f64> {
    if x.len() != spec.order() {
        return Err(VpError::Validation(format!(
            "vector of length {} for a structure of order {}",
            x.len(),
            spec.order()
        )));
    }
    let residual = spec.null_residual(x);
    let tolerance = NULL_SPACE_TOL * x.norm().max(1.0);
    if residual > tolerance {
        return Err(VpError::ConstraintViolation { residual, tolerance });
    }
    let rank = spec.rank() as f64;
    Ok(-0.5 * rank * (2.0 * std::f64::consts::PI).ln() + 0.5 * spec.log_pdet() - 0.5 * spec.quadratic_form(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rw1_3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
    }

    #[test]
    fn path_laplacian_spectrum() {
        let s = spectral(&rw1_3()).unwrap();
        assert_abs_diff_eq!(s.eigenvalues()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eigenvalues()[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eigenvalues()[2], 0.0, epsilon = 1e-12);
        assert_eq!(s.rank(), 2);
        let null = s.null_basis();
        let c = 1.0 / 3f64.sqrt();
        for i in 0..3 {
            assert_abs_diff_eq!(null[(i, 0)].abs(), c, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_full_rank() {
        let s = spectral(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(s.rank(), 4);
        assert!(s.eigenvalues().iter().all(|&l| (l - 1.0).abs() < 1e-14));
    }

    #[test]
    fn reconstruction_error_small() {
        let m = rw1_3();
        let s = spectral(&m).unwrap();
        let err = (s.reconstruct() - &m).norm() / m.norm();
        assert!(err < 1e-10);
        assert_eq!(s.rank() + s.null_dim(), 3);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(spectral(&m), Err(VpError::Validation(_))));
    }

    #[test]
    fn pseudo_inverse_of_path() {
        let p = spectral(&rw1_3()).unwrap().pseudo_inverse();
        let diag = [5.0 / 9.0, 2.0 / 9.0, 5.0 / 9.0];
        for (i, d) in diag.iter().enumerate() {
            assert_abs_diff_eq!(p[(i, i)], *d, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_of_standard_bivariate_normal() {
        let s = spectral(&DMatrix::identity(2, 2)).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let expected = -(2.0 * std::f64::consts::PI).ln() - 0.5;
        assert_abs_diff_eq!(igmrf_logdensity(&x, &s).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn density_at_zero() {
        let s = spectral(&rw1_3()).unwrap();
        let x = DVector::zeros(3);
        let expected = -(2.0 * std::f64::consts::PI).ln() + 0.5 * 3f64.ln();
        assert_abs_diff_eq!(igmrf_logdensity(&x, &s).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn density_rejects_null_component() {
        let s = spectral(&rw1_3()).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(matches!(
            igmrf_logdensity(&x, &s),
            Err(VpError::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn samples_sum_to_zero() {
        let s = spectral(&rw1_3()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = sample_igmrf(&s, &mut rng);
            assert!(x.sum().abs() < 1e-12);
        }
    }
}
