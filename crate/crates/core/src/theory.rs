//! Mean/sample TC disparity: bound shape, Gaussian caps and constructions.

use nalgebra::{dmatrix, DMatrix, DVector};

use crate::gaussian::{gaussian_tc, MultivariateNormal, SampleMatrix};
use crate::{Error, Result};

/// `(c₃/c₁)ᴰ ln(c₂/c₁) + (c₃/c₁)^{D+2}` with `c₃ = max(c₂, √D)`.
///
/// The theorem's dimension-dependent constant is unknown, so this is a shape
/// only (constant taken as 1). Returns `+∞` for `c1 ≤ 0`.
pub fn theorem1_bound_shape(c1: f64, c2: f64, dim: usize) -> f64 {
    if !(c1 > 0.0) {
        return f64::INFINITY;
    }
    let d = dim as f64;
    let c3 = c2.max(d.sqrt());
    let r = c3 / c1;
    r.powf(d) * (c2 / c1).ln() + r.powf(d + 2.0)
}

/// Upper bound on `TC(μ + ε)` for `ε ~ N(0, σ²I)` and `Var μⱼ = vⱼ`:
/// `½ Σⱼ ln((vⱼ + σ²)/σ²)`.
pub fn gaussian_tc_cap(conditional_std: f64, diag_variances: &[f64]) -> f64 {
    let s2 = conditional_std * conditional_std;
    0.5 * diag_variances
        .iter()
        .map(|v| ((v + s2) / s2).ln())
        .sum::<f64>()
}

/// Anisotropic version, `ε ~ N(0, diag s²)`: every eigenvalue of
/// `Σ + diag s²` is at least `min s²`, so
/// `TC ≤ ½ Σⱼ ln((vⱼ + sⱼ²)/min s²)`.
pub fn gaussian_tc_cap_diag(conditional_std: &[f64], diag_variances: &[f64]) -> Result<f64> {
    if conditional_std.len() != diag_variances.len() {
        return Err(Error::Shape(format!(
            "{} conditional stddevs for {} variances",
            conditional_std.len(),
            diag_variances.len()
        )));
    }
    let min2 = conditional_std
        .iter()
        .map(|s| s * s)
        .fold(f64::INFINITY, f64::min);
    Ok(0.5
        * conditional_std
            .iter()
            .zip(diag_variances)
            .map(|(s, v)| ((v + s * s) / min2).ln())
            .sum::<f64>())
}

/// A 2-D mean covariance paired with a conditional noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityInstance {
    pub mean_cov: DMatrix<f64>,
    pub conditional_std: DVector<f64>,
    /// `+∞` for a singular mean covariance.
    pub tc_mean: f64,
    pub tc_sample_gaussian: f64,
}

impl DisparityInstance {
    pub fn sample_cov(&self) -> DMatrix<f64> {
        let mut c = self.mean_cov.clone();
        for (j, s) in self.conditional_std.iter().enumerate() {
            c[(j, j)] += s * s;
        }
        c
    }

    /// Draw `n` means and the matching samples `z = μ + σ′ ⊙ ε`.
    pub fn sample(&self, n: usize, rng: &mut crate::Rng) -> Result<(SampleMatrix, SampleMatrix)> {
        let d = self.mean_cov.nrows();
        let means = MultivariateNormal::centered(self.mean_cov.clone())?.sample(n, rng);
        let eps = MultivariateNormal::centered(DMatrix::identity(d, d))?.sample(n, rng);
        let mut z = means.matrix().clone();
        for c in 0..d {
            let s = self.conditional_std[c];
            for r in 0..n {
                z[(r, c)] += s * eps[(r, c)];
            }
        }
        Ok((means, SampleMatrix::new(z)?))
    }
}

/// Correlation `ρ = √(1 − e^{−2T})` of a unit-variance pair with TC `T`.
pub fn correlation_for_tc(target: f64) -> f64 {
    (-(-2.0 * target).exp_m1()).sqrt()
}

/// 2-D instance with `TC(μ) = target` and conditional stddevs `σ′`.
///
/// Finite targets use unit variances and `ρ = √(1 − e^{−2T})`; `+∞` uses the
/// singular `[[1, 0.1], [0.1, 0.01]]`.
pub fn disparity_construct(
    target_tc_mean: f64,
    sigma_prime: [f64; 2],
) -> Result<DisparityInstance> {
    if target_tc_mean.is_nan() || target_tc_mean < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "target TC must be nonnegative, got {target_tc_mean}"
        )));
    }
    if sigma_prime.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidConfig(
            "conditional stddevs must be positive".into(),
        ));
    }
    let (mean_cov, tc_mean) = if target_tc_mean.is_infinite() {
        (dmatrix![1.0, 0.1; 0.1, 0.01], f64::INFINITY)
    } else {
        let rho = correlation_for_tc(target_tc_mean);
        // Gaussian TC of a unit-variance pair is −½ ln(1 − ρ²). Carry the
        // complement e^{−2T} exactly: forming 1 − ρ² from the rounded ρ loses
        // all precision once T exceeds ~14. `abs` folds the −0 at T = 0.
        let tc = (-0.5 * (-2.0 * target_tc_mean).exp().ln()).abs();
        (dmatrix![1.0, rho; rho, 1.0], tc)
    };
    let mut inst = DisparityInstance {
        mean_cov,
        conditional_std: DVector::from_column_slice(&sigma_prime),
        tc_mean,
        tc_sample_gaussian: 0.0,
    };
    inst.tc_sample_gaussian = gaussian_tc(&inst.sample_cov())?;
    Ok(inst)
}

/// Closeness estimate `√(1 − e^{−t²/4})` for `P(|x| < t)`, `x ~ N(0, 2)`.
///
/// This integrates over the disc of radius `t` instead of the square
/// `[−t, t]²`, so it is a lower bound on the exact `erf(t/2)`.
pub fn close_probability(t: f64) -> f64 {
    (-(-t * t / 4.0).exp_m1()).sqrt()
}
