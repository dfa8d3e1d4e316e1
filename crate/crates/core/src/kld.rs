//! Numerical check that the distance of the VP interaction model from its
//! main-effects base model behaves like `c * sqrt(gamma)`.
//!
//! With `tau = 1` the latent field has covariance
//! `Sigma(gamma) = (1 - gamma) Q0^- + gamma Q1^-`, where `Q0^-` collects the
//! main effects and `Q1^-` is the pseudo-inverse of the interaction
//! structure. For a small base value `gamma0` the root-KLD distance
//! `d(gamma) = sqrt(2 KLD(Sigma(gamma) || Sigma(gamma0)))` is dominated by
//! `m gamma / gamma0`, where `m` is the number of support directions that
//! `Q0^-` does not reach. Hence `d(gamma) / sqrt(gamma) ~ sqrt(m / gamma0)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpError};
use crate::graph::AdjacencyGraph;
use crate::interaction::{build_interaction, InteractionType};
use crate::spectral::spectral;
use crate::structure::{icar_structure, rw_structure, scale_structure, StructureMatrix};

pub const DEFAULT_GAMMA0: f64 = 1e-6;
/// Maximum relative spread of `d(gamma) / sqrt(gamma)` for a pass.
pub const SPREAD_TOL: f64 = 1e-3;
/// Maximum relative error of the fitted constant for a pass.
pub const CONSTANT_TOL: f64 = 0.02;
/// Largest `n_time * n_space` accepted by [`verify_result1`].
pub const MAX_VERIFY_CELLS: usize = 2500;

/// Eigenvalues of a projected covariance below this fraction of the
/// largest are taken as a loss of support.
const SUPPORT_TOL: f64 = 1e-12;

pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Covariance of the main effects mapped onto the space-time grid.
#[derive(Debug, Clone)]
pub struct MainEffectsCovariance {
    pub matrix: DMatrix<f64>,
    pub phi: f64,
    pub psi: Option<(f64, f64)>,
}

impl MainEffectsCovariance {
    pub fn includes_iid(&self) -> bool {
        self.psi.is_some()
    }
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(VpError::Validation(format!("{name} = {w} must lie in [0, 1]")));
    }
    Ok(())
}

/// `(1-phi) (1 (x) I) C_time (1 (x) I)^T + phi (I (x) 1) C_space (I (x) 1)^T`
/// from the time and space covariance matrices directly. With `psi`, each
/// covariance is first mixed with an identity: `(1-psi) C + psi I`.
pub fn main_effects_covariance_from(
    time_cov: &DMatrix<f64>,
    space_cov: &DMatrix<f64>,
    phi: f64,
    psi: Option<(f64, f64)>,
) -> Result<MainEffectsCovariance> {
    if !time_cov.is_square() || !space_cov.is_square() {
        return Err(VpError::Validation("covariances must be square".into()));
    }
    check_weight("phi", phi)?;
    let (n_time, n_space) = (time_cov.nrows(), space_cov.nrows());
    let mut c_time = time_cov.clone();
    let mut c_space = space_cov.clone();
    if let Some((psi1, psi2)) = psi {
        check_weight("psi1", psi1)?;
        check_weight("psi2", psi2)?;
        c_time = c_time * (1.0 - psi1) + DMatrix::identity(n_time, n_time) * psi1;
        c_space = c_space * (1.0 - psi2) + DMatrix::identity(n_space, n_space) * psi2;
    }
    let n = n_time * n_space;
    let matrix = DMatrix::from_fn(n, n, |r, c| {
        let (jr, ir) = (r / n_time, r % n_time);
        let (jc, ic) = (c / n_time, c % n_time);
        (1.0 - phi) * c_time[(ir, ic)] + phi * c_space[(jr, jc)]
    });
    Ok(MainEffectsCovariance { matrix, phi, psi })
}

/// Main-effects covariance from scaled temporal and spatial structures.
pub fn main_effects_covariance(
    time: &StructureMatrix,
    space: &StructureMatrix,
    phi: f64,
    psi: Option<(f64, f64)>,
) -> Result<MainEffectsCovariance> {
    if !time.is_scaled() || !space.is_scaled() {
        return Err(VpError::Validation("main effects need scaled structure matrices".into()));
    }
    let c_time = time.spectral()?.pseudo_inverse();
    let c_space = space.spectral()?.pseudo_inverse();
    main_effects_covariance_from(&c_time, &c_space, phi, psi)
}

/// KLD between two zero-mean Gaussians with singular covariances that share
/// a common support, evaluated in an orthonormal basis of that support.
pub fn singular_gaussian_kld(sigma1: &DMatrix<f64>, sigma0: &DMatrix<f64>) -> Result<f64> {
    if sigma1.shape() != sigma0.shape() || !sigma1.is_square() {
        return Err(VpError::Validation("covariances must be square and of equal size".into()));
    }
    let union = spectral(&((sigma1 + sigma0) * 0.5))?;
    let basis = union.range_basis();
    let k = basis.ncols();
    if k == 0 {
        return Err(VpError::Support("covariances are zero".into()));
    }
    let a1 = basis.transpose() * sigma1 * &basis;
    let a0 = basis.transpose() * sigma0 * &basis;
    let a1 = (&a1 + a1.transpose()) * 0.5;
    let a0 = (&a0 + a0.transpose()) * 0.5;
    for (label, a) in [("Sigma0", &a0), ("Sigma1", &a1)] {
        let values = a.clone().symmetric_eigenvalues();
        let (max, min) = (values.max(), values.min());
        if !(min > SUPPORT_TOL * max) {
            return Err(VpError::Support(format!(
                "{label} is singular on the joint support (eigenvalue ratio {:e})",
                min / max
            )));
        }
    }
    // generalized eigenvalues of (A1, A0) via L^{-1} A1 L^{-T}
    let chol = a0
        .cholesky()
        .ok_or_else(|| VpError::Numerical("Sigma0 is not positive definite on the support".into()))?;
    let l = chol.l();
    let left = l
        .solve_lower_triangular(&a1)
        .ok_or_else(|| VpError::Numerical("singular Cholesky factor".into()))?;
    let m = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| VpError::Numerical("singular Cholesky factor".into()))?;
    let m = (&m + m.transpose()) * 0.5;
    let alphas = m.symmetric_eigenvalues();
    if alphas.iter().any(|&a| a <= 0.0) {
        return Err(VpError::Numerical("nonpositive generalized eigenvalue".into()));
    }
    let kld = 0.5 * alphas.iter().map(|&a| (a - 1.0) - (a - 1.0).ln_1p()).sum::<f64>();
    Ok(kld.max(0.0))
}

/// Number of joint-support directions not reached by `q0_cov`.
pub fn joint_direction_count(q0_cov: &DMatrix<f64>, q1_cov: &DMatrix<f64>) -> Result<usize> {
    let rank0 = spectral(q0_cov)?.rank();
    let rank_union = spectral(&(q0_cov + q1_cov))?.rank();
    Ok(rank_union - rank0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KldReport {
    pub interaction_type: InteractionType,
    pub n_time: usize,
    pub n_space: usize,
    pub rw_order: usize,
    pub includes_iid: bool,
    pub gamma0: f64,
    pub grid: Vec<f64>,
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub ratio_mean: f64,
    pub ratio_spread: f64,
    pub dominant_constant: f64,
    pub expected_constant: f64,
    pub joint_directions: usize,
    /// Rank of the interaction structure, the closed-form count when the
    /// main effects span exactly the interaction's null space.
    pub interaction_rank: usize,
}

impl KldReport {
    pub fn constant_error(&self) -> f64 {
        (self.dominant_constant / self.expected_constant - 1.0).abs()
    }

    pub fn passes(&self) -> bool {
        self.ratio_spread < SPREAD_TOL && self.constant_error() < CONSTANT_TOL
    }
}

/// Distance curve from precomputed main-effects and interaction covariances.
pub fn distance_curve_from(
    q0_cov: &DMatrix<f64>,
    q1_cov: &DMatrix<f64>,
    gamma0: f64,
    grid: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
    if !(gamma0 > 0.0 && gamma0 <= 1e-4) {
        return Err(VpError::Validation(format!("gamma0 = {gamma0} must lie in (0, 1e-4]")));
    }
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(VpError::Validation("grid values must lie in (0, 1)".into()));
    }
    let mix = |g: f64| q0_cov * (1.0 - g) + q1_cov * g;
    let sigma0 = mix(gamma0);
    let mut distances = Vec::with_capacity(grid.len());
    let mut ratios = Vec::with_capacity(grid.len());
    for &g in &grid {
        let d = (2.0 * singular_gaussian_kld(&mix(g), &sigma0)?).sqrt();
        distances.push(d);
        ratios.push(d / g.sqrt());
    }
    let m = joint_direction_count(q0_cov, q1_cov)?;
    Ok((grid, distances, ratios, m))
}

/// Distance curve for interaction `kind` on scaled structures.
#[allow(clippy::too_many_arguments)]
pub fn distance_curve(
    kind: InteractionType,
    time: &StructureMatrix,
    space: &StructureMatrix,
    phi: f64,
    psi: Option<(f64, f64)>,
    gamma0: f64,
    grid: &[f64],
) -> Result<KldReport> {
    let interaction = build_interaction(kind, time, space)?;
    let q1_cov = interaction.spectrum().to_dense().pseudo_inverse();
    let q0 = main_effects_covariance(time, space, phi, psi)?;
    let (grid, distances, ratios, m) = distance_curve_from(&q0.matrix, &q1_cov, gamma0, grid)?;
    let fitted: Vec<f64> = grid
        .iter()
        .zip(&ratios)
        .filter(|(g, _)| **g >= 100.0 * gamma0)
        .map(|(_, r)| *r)
        .collect();
    if fitted.is_empty() {
        return Err(VpError::Validation("grid has no value above 100 * gamma0".into()));
    }
    let mean = fitted.iter().sum::<f64>() / fitted.len() as f64;
    let max = fitted.iter().copied().fold(f64::MIN, f64::max);
    let min = fitted.iter().copied().fold(f64::MAX, f64::min);
    let rw_order = match time.kind() {
        crate::structure::StructureKind::Rw2 => 2,
        _ => 1,
    };
    Ok(KldReport {
        interaction_type: kind,
        n_time: time.order(),
        n_space: space.order(),
        rw_order,
        includes_iid: psi.is_some(),
        gamma0,
        grid,
        distances,
        ratios,
        ratio_mean: mean,
        ratio_spread: (max - min) / mean,
        dominant_constant: mean,
        expected_constant: (m as f64 / gamma0).sqrt(),
        joint_directions: m,
        interaction_rank: interaction.spectrum().rank(),
    })
}

/// One configuration checked by [`verify_result1`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub interaction_type: InteractionType,
    pub n_time: usize,
    pub n_space: usize,
    pub rw_order: usize,
    pub phi: f64,
    pub psi: Option<(f64, f64)>,
    /// Spatial graph; a path over `n_space` areas when absent.
    #[serde(skip)]
    pub graph: Option<AdjacencyGraph>,
}

impl VerifyConfig {
    pub fn path(kind: InteractionType, n_time: usize, n_space: usize, rw_order: usize, phi: f64) -> Self {
        Self {
            interaction_type: kind,
            n_time,
            n_space,
            rw_order,
            phi,
            psi: None,
            graph: None,
        }
    }

    pub fn with_iid(mut self, psi1: f64, psi2: f64) -> Self {
        self.psi = Some((psi1, psi2));
        self
    }

    pub fn run(&self, gamma0: f64, grid: &[f64]) -> Result<KldReport> {
        let cells = self.n_time * self.n_space;
        if cells > MAX_VERIFY_CELLS {
            return Err(VpError::Size(format!(
                "{cells} cells exceeds the verification limit of {MAX_VERIFY_CELLS}"
            )));
        }
        let graph = match &self.graph {
            Some(g) => g.clone(),
            None => AdjacencyGraph::path(self.n_space)?,
        };
        if graph.n_areas() != self.n_space {
            return Err(VpError::Validation(format!(
                "graph has {} areas, expected {}",
                graph.n_areas(),
                self.n_space
            )));
        }
        let time = scale_structure(&rw_structure(self.n_time, self.rw_order)?)?;
        let space = scale_structure(&icar_structure(&graph)?)?;
        distance_curve(self.interaction_type, &time, &space, self.phi, self.psi, gamma0, grid)
    }
}

/// Outcome of one verification configuration.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub config: VerifyConfig,
    pub result: Result<KldReport>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.passes())
    }
}

/// Runs every configuration; failures are reported, never raised.
pub fn verify_result1(configs: &[VerifyConfig], gamma0: f64, grid: &[f64]) -> (Vec<VerifyOutcome>, bool) {
    let outcomes: Vec<VerifyOutcome> = configs
        .iter()
        .map(|c| VerifyOutcome {
            config: c.clone(),
            result: c.run(gamma0, grid),
        })
        .collect();
    let all = outcomes.iter().all(VerifyOutcome::passed);
    (outcomes, all)
}

/// Rank of a covariance by the default threshold.
pub fn covariance_rank(m: &DMatrix<f64>) -> Result<usize> {
    Ok(spectral(m)?.rank())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scaled_pair(n_time: usize, order: usize, n_space: usize) -> (StructureMatrix, StructureMatrix) {
        let g = AdjacencyGraph::path(n_space).unwrap();
        (
            scale_structure(&rw_structure(n_time, order).unwrap()).unwrap(),
            scale_structure(&icar_structure(&g).unwrap()).unwrap(),
        )
    }

    #[test]
    fn phi_one_keeps_only_space() {
        let (t, s) = scaled_pair(3, 1, 3);
        let cov = main_effects_covariance(&t, &s, 1.0, None).unwrap();
        let cs = s.spectral().unwrap().pseudo_inverse();
        for r in 0..9 {
            for c in 0..9 {
                assert!((cov.matrix[(r, c)] - cs[(r / 3, c / 3)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn main_effects_rank_without_iid() {
        let (t, s) = scaled_pair(3, 1, 3);
        let cov = main_effects_covariance(&t, &s, 0.5, None).unwrap();
        assert_eq!(covariance_rank(&cov.matrix).unwrap(), 4);
    }

    #[test]
    fn main_effects_rank_pure_iid() {
        let (t, s) = scaled_pair(3, 1, 4);
        let cov = main_effects_covariance(&t, &s, 0.5, Some((1.0, 1.0))).unwrap();
        assert!(cov.includes_iid());
        assert_eq!(covariance_rank(&cov.matrix).unwrap(), 3 + 4 - 1);
        // 0.5 (1 (x) I)(1 (x) I)^T + 0.5 (I (x) 1)(I (x) 1)^T
        for r in 0..12 {
            for c in 0..12 {
                let same_time = (r % 3 == c % 3) as u8 as f64;
                let same_area = (r / 3 == c / 3) as u8 as f64;
                assert!((cov.matrix[(r, c)] - 0.5 * (same_time + same_area)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kld_of_identical_is_zero() {
        let (t, s) = scaled_pair(4, 1, 3);
        let cov = main_effects_covariance(&t, &s, 0.3, None).unwrap();
        assert!(singular_gaussian_kld(&cov.matrix, &cov.matrix).unwrap() < 1e-10);
    }

    #[test]
    fn kld_bivariate_closed_form() {
        let s1 = DMatrix::identity(2, 2);
        let s0 = DMatrix::identity(2, 2) * 2.0;
        let expected = 0.5 * (1.0 - 2.0 + 2.0 * 2f64.ln());
        assert!((singular_gaussian_kld(&s1, &s0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.19315).abs() < 1e-5);
    }

    #[test]
    fn kld_support_mismatch() {
        let s1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
        let s0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 1.0]));
        assert!(matches!(singular_gaussian_kld(&s1, &s0), Err(VpError::Support(_))));
    }

    #[test]
    fn type_iv_ratio_is_flat() {
        let (t, s) = scaled_pair(4, 1, 4);
        let r = distance_curve(InteractionType::IV, &t, &s, 0.5, None, 1e-6, &default_grid()).unwrap();
        assert!(r.ratio_spread < 1e-3, "{}", r.ratio_spread);
        assert_eq!(r.joint_directions, r.interaction_rank);
        // closed form: 2 KLD ~ (n - r) gamma / gamma0
        let closed = ((r.interaction_rank as f64) * 0.5 / 1e-6).sqrt();
        assert!((r.distances[4] / closed - 1.0).abs() < 1e-3);
    }

    #[test]
    fn type_i_eigen_count() {
        let (t, s) = scaled_pair(3, 1, 3);
        let r = distance_curve(InteractionType::I, &t, &s, 0.5, None, 1e-6, &default_grid()).unwrap();
        assert_eq!(r.joint_directions, 5);
        assert!(r.constant_error() < 0.01, "{}", r.constant_error());
    }

    #[test]
    fn gamma0_in_grid_gives_zero() {
        let (t, s) = scaled_pair(4, 1, 4);
        let mut grid = default_grid();
        grid.push(1e-6);
        let r = distance_curve(InteractionType::IV, &t, &s, 0.5, None, 1e-6, &grid).unwrap();
        assert_eq!(r.grid[0], 1e-6);
        assert!(r.distances[0] < 1e-6);
        assert!(r.passes());
    }

    #[test]
    fn doubling_space_structure_leaves_constant() {
        let (t, s) = scaled_pair(4, 1, 4);
        let q1 = build_interaction(InteractionType::IV, &t, &s)
            .unwrap()
            .spectrum()
            .to_dense()
            .pseudo_inverse();
        let ct = t.spectral().unwrap().pseudo_inverse();
        let cs = s.spectral().unwrap().pseudo_inverse();
        let base = main_effects_covariance_from(&ct, &cs, 0.5, None).unwrap();
        let doubled = main_effects_covariance_from(&ct, &(cs * 0.5), 0.5, None).unwrap();
        let grid = default_grid();
        let (_, _, r1, _) = distance_curve_from(&base.matrix, &q1, 1e-6, &grid).unwrap();
        let (_, _, r2, _) = distance_curve_from(&doubled.matrix, &q1, 1e-6, &grid).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&r2) / mean(&r1) - 1.0).abs() < 0.02);
    }

    #[test]
    fn verify_reports_failures_without_raising() {
        let bad = VerifyConfig::path(InteractionType::IV, 60, 60, 1, 0.5);
        let (outcomes, all) = verify_result1(&[bad], 1e-6, &default_grid());
        assert!(!all);
        assert!(matches!(outcomes[0].result, Err(VpError::Size(_))));
    }
}
