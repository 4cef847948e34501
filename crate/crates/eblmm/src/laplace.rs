//! Laplace approximation of the log marginal likelihood at the MAP.
//!
//! `log ML ≈ (d/2) log 2π + log L(theta*) - 1/2 log det(-H(theta*))` with
//! `H` the Hessian of the log-integrand. A coordinate mask restricts the
//! approximation to a subset of parameters, holding the rest fixed — on the
//! fixed-effect block the integrand is exactly Gaussian, which gives a
//! closed-form oracle for this module.

use nalgebra::DMatrix;

use crate::coords::{restrict_matrix, CoordinateMask, ParamCoordinates};
use crate::design::ModelDesign;
use crate::em::{fit_map_masked, EmSettings};
use crate::error::{Error, Result};
use crate::hessian::{hessian_log_likelihood, hessian_log_prior};
use crate::likelihood::log_posterior_unnormalized;
use crate::params::{FitResult, ModelParams, PriorSpec};
use crate::scalar::Real;

/// Log-determinant of `-H` after symmetrization, with eigenvalue clipping
/// at 1e-8 when the matrix is not positive definite. Returns the value and
/// whether clipping was applied.
fn log_det_neg_hessian<T: Real>(h: &DMatrix<T>) -> Result<(T, bool)> {
    let d = h.nrows();
    let mut nh = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            nh[(i, j)] = -(h[(i, j)] + h[(j, i)]) / T::of(2.0);
        }
    }
    if let Some(chol) = nalgebra::Cholesky::new(nh.clone()) {
        let mut s = T::zero();
        for i in 0..d {
            s += chol.l_dirty()[(i, i)].ln();
        }
        return Ok((s + s, false));
    }
    let eigen = nh.symmetric_eigen();
    let floor = T::of(1e-8);
    let mut s = T::zero();
    for &ev in eigen.eigenvalues.iter() {
        s += ev.max(floor).ln();
    }
    Ok((s, true))
}

fn laplace_at<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
    fit: &mut FitResult<T>,
    mask: &CoordinateMask,
) -> Result<T> {
    let hl = hessian_log_likelihood(design, &fit.params)?;
    let hp = hessian_log_prior(design, &fit.params, prior)?;
    let h = restrict_matrix(&(hl + hp), mask);
    let (log_det, clipped) = log_det_neg_hessian(&h)?;
    fit.flags.hessian_clipped |= clipped;
    if fit.params.sigma2 < T::of(1e-10) {
        fit.flags.sigma2_near_boundary = true;
    }
    let d = T::of_usize(mask.count());
    let lp = log_posterior_unnormalized(design, &fit.params, prior)?;
    Ok(d / T::of(2.0) * T::of((2.0 * std::f64::consts::PI).ln()) + lp - log_det / T::of(2.0))
}

/// Laplace-approximated log marginal likelihood over all parameters.
///
/// Runs the MAP fit, assembles the Hessian at the mode and returns the
/// approximation together with the fit. A fit that hit the iteration cap is
/// not an error; the value is still returned with `converged = false` so an
/// outer optimizer sees a continuous objective.
pub fn laplace_log_marginal<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
    settings: &EmSettings<T>,
) -> Result<(T, FitResult<T>)> {
    let layout = ParamCoordinates::for_design(design);
    let mask = CoordinateMask::all(&layout);
    if prior.effects.iter().any(|e| e.strength == T::one()) {
        return Err(Error::Unsupported {
            message: "cannot integrate a covariance with a point-mass prior (b = 1); \
                      exclude it with a coordinate mask"
                .into(),
        });
    }
    let mut fit = crate::em::fit_map(design, prior, settings)?;
    let value = laplace_at(design, prior, &mut fit, &mask)?;
    fit.marginal_log_likelihood = Some(value);
    Ok((value, fit))
}

/// Laplace approximation over a subset of coordinates, holding the rest of
/// the parameters fixed at `fixed`. The mask must align with the parameter
/// groups (`beta`, each `Sigma_r`, `sigma2`); the mode is searched over the
/// included groups only.
pub fn laplace_log_marginal_restricted<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
    settings: &EmSettings<T>,
    mask: &CoordinateMask,
    fixed: &ModelParams<T>,
) -> Result<(T, FitResult<T>)> {
    let layout = ParamCoordinates::for_design(design);
    if mask.count() == 0 {
        return Err(Error::invalid("coordinate mask", "must include at least one coordinate"));
    }
    let group_mask = mask.to_group_mask(&layout)?;
    for (r, (gm, eff)) in group_mask.sigmas.iter().zip(&prior.effects).enumerate() {
        if *gm && eff.strength == T::one() {
            return Err(Error::Unsupported {
                message: format!(
                    "cannot integrate Sigma[{r}] under a point-mass prior (b = 1)"
                ),
            });
        }
    }
    let settings = settings.clone().with_init(fixed.clone());
    let mut fit = fit_map_masked(design, prior, &settings, &group_mask)?;
    let value = laplace_at(design, prior, &mut fit, mask)?;
    fit.marginal_log_likelihood = Some(value);
    Ok((value, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::CoordinateMask;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    /// Closed-form log of `∫ N(y; X b, s2 I) N(b; 0, s2/lambda I) db`,
    /// which is the density of `N(0, s2 (I + X X^T / lambda))` at `y`.
    fn conjugate_log_marginal(y: &DVector<f64>, x: &DMatrix<f64>, s2: f64, lambda: f64) -> f64 {
        let n = y.len();
        let cov = (DMatrix::identity(n, n) + x * x.transpose() / lambda) * s2;
        let chol = nalgebra::Cholesky::new(cov).unwrap();
        let mut logdet = 0.0;
        for i in 0..n {
            logdet += chol.l_dirty()[(i, i)].ln();
        }
        logdet *= 2.0;
        let sol = chol.solve(y);
        -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * y.dot(&sol)
    }

    #[test]
    fn beta_restricted_laplace_is_exact_on_the_gaussian_subproblem() {
        // R = 0 with sigma2 held fixed: the integrand is exactly Gaussian in
        // beta, so Laplace equals the conjugate closed form.
        let n = 9;
        let p = 3;
        let y = DVector::from_fn(n, |i, _| ((i * 13 % 7) as f64) / 2.0 - 1.0);
        let x = DMatrix::from_fn(n, p, |i, c| (((i * (c + 2) + 3 * c) % 11) as f64) / 5.0 - 1.0);
        let design = ModelDesign::new(y.clone(), x.clone(), vec![]).unwrap();
        let sigma2 = 0.8;
        let lambda = 2.3;
        let prior = PriorSpec::new(lambda, 0.0, vec![]).unwrap();
        let layout = ParamCoordinates::for_design(&design);
        let mask = CoordinateMask::beta_only(&layout);
        let fixed = ModelParams::new(DVector::zeros(p), vec![], sigma2).unwrap();
        let settings = EmSettings::default().with_tolerance(1e-14);
        let (value, fit) =
            laplace_log_marginal_restricted(&design, &prior, &settings, &mask, &fixed).unwrap();
        assert!(fit.converged);
        let exact = conjugate_log_marginal(&y, &x, sigma2, lambda);
        assert_relative_eq!(value, exact, epsilon = 1e-8);
    }

    #[test]
    fn full_laplace_is_finite_on_a_small_mixed_model() {
        let n = 12;
        let y = DVector::from_fn(n, |i, _| ((i * 5 % 7) as f64) - 3.0);
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { ((i % 4) as f64) / 2.0 });
        let u = DMatrix::from_element(n, 1, 1.0);
        let groups = (0..n).map(|i| i % 3).collect();
        let eff = crate::design::RandomEffectSpec::new(groups, 3, u).unwrap();
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let prior = PriorSpec::new(
            0.5,
            1e-3,
            vec![crate::params::EffectPrior::new(DMatrix::identity(1, 1), 0.4).unwrap()],
        )
        .unwrap();
        let (value, fit) =
            laplace_log_marginal(&design, &prior, &EmSettings::default()).unwrap();
        assert!(value.is_finite());
        assert!(fit.converged);
        assert_eq!(fit.marginal_log_likelihood, Some(value));
    }

    #[test]
    fn dirac_prior_is_rejected_for_full_integration() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let u = DMatrix::from_element(4, 1, 1.0);
        let eff = crate::design::RandomEffectSpec::new(vec![0, 0, 1, 1], 2, u).unwrap();
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let prior = PriorSpec::new(
            0.0,
            0.0,
            vec![crate::params::EffectPrior::new(DMatrix::identity(1, 1), 1.0).unwrap()],
        )
        .unwrap();
        assert!(laplace_log_marginal(&design, &prior, &EmSettings::default()).is_err());
    }
}
