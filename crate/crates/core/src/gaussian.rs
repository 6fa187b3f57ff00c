//! Multivariate normal utilities and the closed-form Gaussian total correlation.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Relative tolerance for the symmetry check of a covariance matrix.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Relative tolerance for negative eigenvalues of a PSD covariance.
pub const PSD_TOL: f64 = 1e-10;
/// `det(corr)` at or below this value is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Row-per-sample matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix(DMatrix<f64>);

impl SampleMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample matrix entry {pos}")));
        }
        Ok(Self(values))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for SampleMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl From<SampleMatrix> for DMatrix<f64> {
    fn from(s: SampleMatrix) -> Self {
        s.0
    }
}

/// Gaussian with a (possibly singular) PSD covariance.
#[derive(Debug, Clone)]
pub struct MultivariateNormal {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// Lower factor `L` with `L Lᵀ = Σ` (Cholesky, or eigen-clipped when singular).
    factor: DMatrix<f64>,
    cholesky: Option<Cholesky<f64, Dyn>>,
}

impl MultivariateNormal {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::InvalidDistribution(format!(
                "covariance shape {:?} does not match mean dimension {d}",
                covariance.shape()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite parameter".into()));
        }
        check_symmetric(&covariance).map_err(Error::InvalidDistribution)?;

        let cholesky = Cholesky::new(covariance.clone());
        let factor = match &cholesky {
            Some(c) => c.l(),
            None => {
                let eig = SymmetricEigen::new(covariance.clone());
                let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
                let min_eig = eig
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                if min_eig < -PSD_TOL * max_eig.max(f64::MIN_POSITIVE) {
                    return Err(Error::InvalidDistribution(format!(
                        "covariance is indefinite (min eigenvalue {min_eig:e})"
                    )));
                }
                let sqrt_eig = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_eig)
            }
        };
        Ok(Self {
            mean,
            covariance,
            factor,
            cholesky,
        })
    }

    /// Zero-mean distribution with the given covariance.
    pub fn centered(covariance: DMatrix<f64>) -> Result<Self> {
        let d = covariance.nrows();
        Self::new(DVector::zeros(d), covariance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `n` i.i.d. draws, one per row.
    pub fn sample(&self, n: usize, rng: &mut crate::Rng) -> SampleMatrix {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut eps = DVector::zeros(d);
        for r in 0..n {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let x = &self.mean + &self.factor * &eps;
            out.row_mut(r).copy_from(&x.transpose());
        }
        SampleMatrix(out)
    }

    /// Exact log density. Fails for singular covariance.
    pub fn log_pdf(&self, point: &DVector<f64>) -> Result<f64> {
        let chol = self.cholesky.as_ref().ok_or(Error::SingularCovariance)?;
        if point.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has dimension {}, distribution has {}",
                point.len(),
                self.dim()
            )));
        }
        let diff = point - &self.mean;
        let y = chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or(Error::SingularCovariance)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + y.norm_squared()))
    }
}

/// Draw `n` samples; see [`MultivariateNormal::sample`].
pub fn mvn_sample(dist: &MultivariateNormal, n: usize, rng: &mut crate::Rng) -> SampleMatrix {
    dist.sample(n, rng)
}

pub fn mvn_logpdf(dist: &MultivariateNormal, point: &DVector<f64>) -> Result<f64> {
    dist.log_pdf(point)
}

fn check_symmetric(m: &DMatrix<f64>) -> std::result::Result<(), String> {
    if !m.is_square() {
        return Err(format!("matrix is {}x{}, not square", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(format!("not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Total correlation of `N(0, Σ)`: `½(Σⱼ ln Σⱼⱼ − ln det Σ)`.
///
/// Evaluated on the correlation matrix through a Cholesky factor. Returns
/// `+∞` when the correlation determinant is at or below [`SINGULAR_TOL`].
pub fn gaussian_tc(covariance: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(covariance).map_err(Error::InvalidCovariance)?;
    if let Some(j) = covariance.diagonal().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidCovariance(format!(
            "diagonal entry {j} is not strictly positive"
        )));
    }
    let corr = correlation_from_covariance(covariance)?;
    let Some(chol) = Cholesky::new(corr) else {
        return Ok(f64::INFINITY);
    };
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    if !log_det.is_finite() || log_det <= SINGULAR_TOL.ln() {
        return Ok(f64::INFINITY);
    }
    // Hadamard: det(corr) ≤ 1, so anything below zero is rounding.
    Ok((-0.5 * log_det).max(0.0))
}

/// Unbiased sample covariance (divisor `n − 1`).
pub fn empirical_covariance(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    Ok(centered.tr_mul(&centered) / (n as f64 - 1.0))
}

/// `corrᵢⱼ = covᵢⱼ / √(covᵢᵢ covⱼⱼ)` with an exact unit diagonal.
pub fn correlation_from_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Shape(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let sd: Vec<f64> = cov
        .diagonal()
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v > 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::ZeroVariance(j))
            }
        })
        .collect::<Result<_>>()?;
    let d = cov.nrows();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (sd[i] * sd[j])
        }
    }))
}

/// Unit-diagonal matrix with every off-diagonal entry equal to `rho`.
pub fn equicorrelation(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho })
}

/// `(1 − ρ)^{D−1} (1 + (D − 1)ρ)`.
pub fn equicorrelation_det(dim: usize, rho: f64) -> f64 {
    let d = dim as f64;
    (1.0 - rho).powf(d - 1.0) * (1.0 + (d - 1.0) * rho)
}

/// Nonnegative `ρ` whose equicorrelation matrix has determinant `det`,
/// found by bisection (the determinant falls monotonically on `[0, 1)`).
pub fn equicorrelation_for_det(dim: usize, det: f64) -> Result<f64> {
    if dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "need dimension ≥ 2, got {dim}"
        )));
    }
    if !(det > 0.0 && det <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "determinant {det} infeasible for an equicorrelation matrix; feasible range is (0, 1]"
        )));
    }
    if det == 1.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if equicorrelation_det(dim, mid) > det {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use std::f64::consts::PI;

    fn fig1_cov() -> DMatrix<f64> {
        dmatrix![1.0, 0.1; 0.1, 0.01]
    }

    #[test]
    fn sample_zero_rows() {
        let dist = MultivariateNormal::centered(DMatrix::identity(2, 2)).unwrap();
        let s = dist.sample(0, &mut crate::rng_from_seed(0));
        assert_eq!(s.shape(), (0, 2));
    }

    #[test]
    fn sample_variances_match_diagonal() {
        let dist = MultivariateNormal::centered(dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        let s = dist.sample(100_000, &mut crate::rng_from_seed(1));
        let cov = empirical_covariance(&s).unwrap();
        assert!((cov[(0, 0)] - 4.0).abs() < 0.15, "{}", cov[(0, 0)]);
        assert!((cov[(1, 1)] - 9.0).abs() < 0.15, "{}", cov[(1, 1)]);
    }

    #[test]
    fn singular_covariance_samples_are_perfectly_correlated() {
        let cov = fig1_cov();
        // det = 1·0.01 − 0.1² = 0 up to rounding.
        assert!((cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)]).abs() < 1e-15);
        let dist = MultivariateNormal::centered(cov).unwrap();
        let s = dist.sample(100_000, &mut crate::rng_from_seed(2));
        let corr = correlation_from_covariance(&empirical_covariance(&s).unwrap()).unwrap();
        assert!((corr[(0, 1)] - 1.0).abs() < 0.01, "{}", corr[(0, 1)]);
    }

    #[test]
    fn indefinite_or_asymmetric_covariance_rejected() {
        let indefinite = MultivariateNormal::centered(dmatrix![1.0, 2.0; 2.0, 1.0]);
        assert!(matches!(indefinite, Err(Error::InvalidDistribution(_))));
        let asym = MultivariateNormal::centered(dmatrix![1.0, 0.2; 0.1, 1.0]);
        assert!(matches!(asym, Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn logpdf_known_values() {
        let one_d = MultivariateNormal::centered(dmatrix![1.0]).unwrap();
        assert_abs_diff_eq!(
            one_d.log_pdf(&DVector::from_element(1, 0.0)).unwrap(),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-14
        );
        let two_d = MultivariateNormal::centered(DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(
            two_d.log_pdf(&DVector::zeros(2)).unwrap(),
            -(2.0 * PI).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn logpdf_diagonal_is_sum_of_univariate() {
        let uni = |var: f64, x: f64| -0.5 * ((2.0 * PI * var).ln() + x * x / var);
        let dist = MultivariateNormal::centered(dmatrix![0.01, 0.0; 0.0, 1.0]).unwrap();
        for p in [[0.0, 0.0], [0.05, -1.3], [-0.2, 2.0]] {
            let got = dist.log_pdf(&DVector::from_row_slice(&p)).unwrap();
            assert_abs_diff_eq!(got, uni(0.01, p[0]) + uni(1.0, p[1]), epsilon = 1e-12);
        }
    }

    #[test]
    fn logpdf_singular_errors() {
        let dist = MultivariateNormal::centered(fig1_cov()).unwrap();
        assert_eq!(
            dist.log_pdf(&DVector::zeros(2)),
            Err(Error::SingularCovariance)
        );
    }

    #[test]
    fn gaussian_tc_examples() {
        for d in 1..6 {
            assert_eq!(gaussian_tc(&DMatrix::identity(d, d)).unwrap(), 0.0);
        }
        assert_eq!(gaussian_tc(&fig1_cov()).unwrap(), f64::INFINITY);
        let tc = gaussian_tc(&dmatrix![1.0, 0.5; 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(tc, -0.5 * 0.75_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(tc, 0.14384, epsilon = 1e-5);
    }

    /// Monte-Carlo KL between N(0, Σ) and the product of its marginals.
    #[test]
    fn gaussian_tc_matches_monte_carlo_kl() {
        let cov = dmatrix![1.0, 0.5; 0.5, 1.0];
        let joint = MultivariateNormal::centered(cov.clone()).unwrap();
        let marg: Vec<_> = (0..2)
            .map(|j| MultivariateNormal::centered(dmatrix![cov[(j, j)]]).unwrap())
            .collect();
        let s = joint.sample(1_000_000, &mut crate::rng_from_seed(11));
        let mut acc = 0.0;
        for r in 0..s.nrows() {
            let x = s.row(r).transpose();
            let mut lr = joint.log_pdf(&x).unwrap();
            for (j, m) in marg.iter().enumerate() {
                lr -= m.log_pdf(&DVector::from_element(1, x[j])).unwrap();
            }
            acc += lr;
        }
        let mc = acc / s.nrows() as f64;
        assert!((mc - gaussian_tc(&cov).unwrap()).abs() < 0.01, "mc = {mc}");
    }

    #[test]
    fn gaussian_tc_rejects_nonpositive_diagonal() {
        assert!(matches!(
            gaussian_tc(&dmatrix![0.0, 0.0; 0.0, 1.0]),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn empirical_covariance_examples() {
        let s = dmatrix![0.0, 0.0; 2.0, 2.0];
        assert_eq!(
            empirical_covariance(&s).unwrap(),
            dmatrix![2.0, 2.0; 2.0, 2.0]
        );

        let dup = dmatrix![1.0, 1.0; -0.5, -0.5; 3.0, 3.0; 0.25, 0.25];
        let c = empirical_covariance(&dup).unwrap();
        assert_eq!(c[(0, 1)], c[(0, 0)]);
        assert_eq!(c[(0, 1)], c[(1, 1)]);

        let dist = MultivariateNormal::centered(DMatrix::identity(2, 2)).unwrap();
        let c = empirical_covariance(&dist.sample(100_000, &mut crate::rng_from_seed(3))).unwrap();
        assert!((c - DMatrix::<f64>::identity(2, 2)).amax() < 0.02);

        assert_eq!(
            empirical_covariance(&dmatrix![1.0, 2.0]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        );
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(
            correlation_from_covariance(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap(),
            DMatrix::<f64>::identity(2, 2)
        );
        let c = correlation_from_covariance(&fig1_cov()).unwrap();
        assert_abs_diff_eq!(c[(0, 1)], 1.0, epsilon = 1e-12);
        let half = correlation_from_covariance(&dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        assert!((half - dmatrix![1.0, 0.5; 0.5, 1.0]).amax() < 1e-15);
        assert_eq!(
            correlation_from_covariance(&dmatrix![1.0, 0.0; 0.0, 0.0]),
            Err(Error::ZeroVariance(1))
        );
    }

    #[test]
    fn equicorrelation_inverts_determinant() {
        for d in [2, 3, 5, 10] {
            for det in [0.01, 0.1, 0.5, 0.9, 1.0] {
                let rho = equicorrelation_for_det(d, det).unwrap();
                let m = equicorrelation(d, rho);
                assert!((m.determinant() - det).abs() < 1e-9, "D={d} det={det}");
            }
        }
        assert_eq!(equicorrelation_for_det(4, 1.0).unwrap(), 0.0);
        // ½ ln 2 at det = 0.5 in two dimensions.
        let rho = equicorrelation_for_det(2, 0.5).unwrap();
        assert_abs_diff_eq!(
            gaussian_tc(&equicorrelation(2, rho)).unwrap(),
            0.5 * 2f64.ln(),
            epsilon = 1e-12
        );
        for bad in [0.0, -0.1, 1.5] {
            assert!(matches!(
                equicorrelation_for_det(3, bad),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
