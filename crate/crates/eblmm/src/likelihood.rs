//! Marginal covariance assembly and log-density evaluation.
//!
//! Integrating the random effects out of the model leaves
//! `y ~ N(X beta, V)` with `V = sigma2 I + sum_r Z_r (I ⊗ Sigma_r) Z_r^T`.
//! All quadratic forms and determinants go through one Cholesky
//! factorization of `V`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::params::{ModelParams, PriorSpec};
use crate::scalar::Real;
use crate::special::{ln_abs_gamma, ln_multivariate_gamma};

/// Marginal covariance `V`, accumulated level by level: the block of rows
/// belonging to level `j` of effect `r` receives `U_j Sigma_r U_j^T`. No
/// Kronecker product is ever materialized.
pub fn assemble_marginal_covariance<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
) -> Result<DMatrix<T>> {
    check_compatible(design, params)?;
    let n = design.n();
    let mut v = DMatrix::from_diagonal_element(n, n, params.sigma2);
    for (r, eff) in design.effects().iter().enumerate() {
        let sigma = &params.sigmas[r];
        for j in 0..eff.levels() {
            let rows = eff.rows_of_level(j);
            let block = eff.level_block(j);
            let contrib = &block * sigma * block.transpose();
            for (bi, &i1) in rows.iter().enumerate() {
                for (bj, &i2) in rows.iter().enumerate() {
                    v[(i1, i2)] += contrib[(bi, bj)];
                }
            }
        }
    }
    Ok(v)
}

pub(crate) fn check_compatible<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
) -> Result<()> {
    if params.n_effects() != design.n_effects() {
        return Err(Error::DimensionMismatch {
            what: "covariance count vs random effects".into(),
            expected: design.n_effects(),
            got: params.n_effects(),
        });
    }
    if params.beta.len() != design.p() {
        return Err(Error::DimensionMismatch {
            what: "beta length vs X columns".into(),
            expected: design.p(),
            got: params.beta.len(),
        });
    }
    for (r, (eff, sigma)) in design.effects().iter().zip(&params.sigmas).enumerate() {
        if sigma.nrows() != eff.dim() {
            return Err(Error::DimensionMismatch {
                what: format!("Sigma[{r}] size vs U[{r}] columns"),
                expected: eff.dim(),
                got: sigma.nrows(),
            });
        }
    }
    Ok(())
}

/// Cholesky factorization of `V` with a single jitter retry, shared by the
/// likelihood, the E-step and the Hessian assembly.
pub(crate) struct VFactor<T: Real> {
    pub chol: Cholesky<T, Dyn>,
    pub n: usize,
}

impl<T: Real> VFactor<T> {
    pub fn new(v: DMatrix<T>) -> Result<Self> {
        let n = v.nrows();
        match Cholesky::new(v.clone()) {
            Some(chol) => Ok(Self { chol, n }),
            None => {
                // One retry with diagonal jitter; silent regularization
                // beyond this would corrupt likelihood comparisons.
                let jitter = T::of(1e-10) * v.trace() / T::of_usize(n);
                let pivot = smallest_leading_pivot(&v);
                let mut vj = v;
                for i in 0..n {
                    vj[(i, i)] += jitter;
                }
                Cholesky::new(vj)
                    .map(|chol| Self { chol, n })
                    .ok_or(Error::NotPositiveDefinite {
                        what: "marginal covariance V".into(),
                        pivot,
                    })
            }
        }
    }

    /// `log det V` from the factor diagonal.
    pub fn log_det(&self) -> T {
        let l = self.chol.l_dirty();
        let mut s = T::zero();
        for i in 0..self.n {
            s += l[(i, i)].ln();
        }
        s + s
    }

    /// Solve `V x = b`.
    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    /// Explicit `V^{-1}`.
    pub fn inverse(&self) -> DMatrix<T> {
        self.chol.inverse()
    }

    /// Quadratic form `b^T V^{-1} b`.
    pub fn quad_form(&self, b: &DVector<T>) -> T {
        let mut c = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut c);
        c.norm_squared()
    }

}

fn smallest_leading_pivot<T: Real>(v: &DMatrix<T>) -> f64 {
    // Diagnostic only: the most negative pivot seen by an unguarded
    // outer-product factorization.
    let n = v.nrows();
    let mut a = v.clone();
    let mut smallest = f64::INFINITY;
    for k in 0..n {
        let piv = a[(k, k)].as_f64();
        smallest = smallest.min(piv);
        if piv <= 0.0 {
            break;
        }
        for i in (k + 1)..n {
            let f = a[(i, k)] / a[(k, k)];
            for j in (k + 1)..=i {
                let v = a[(i, j)] - f * a[(j, k)];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    smallest
}

/// Gaussian log-likelihood of the design under `params`.
pub fn log_likelihood<T: Real>(design: &ModelDesign<T>, params: &ModelParams<T>) -> Result<T> {
    let v = assemble_marginal_covariance(design, params)?;
    let f = VFactor::new(v)?;
    Ok(log_likelihood_with(design, params, &f))
}

pub(crate) fn log_likelihood_with<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
    f: &VFactor<T>,
) -> T {
    let n = T::of_usize(design.n());
    let r = design.y() - design.x() * &params.beta;
    let half = T::of(0.5);
    -half * n * T::of((2.0 * std::f64::consts::PI).ln()) - half * f.log_det()
        - half * f.quad_form(&r)
}

/// Log-density of an inverse-Wishart distribution with the normalizing
/// constant included. `eta` may lie below the properness boundary; the
/// constant then uses the `log|Gamma|` continuation.
fn inverse_wishart_log_density<T: Real>(sigma: &DMatrix<T>, eta: T, phi: &DMatrix<T>) -> Result<T> {
    let q = sigma.nrows();
    let half = T::of(0.5);
    let ln_det = |m: &DMatrix<T>, what: &str| -> Result<T> {
        let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite {
            what: what.into(),
            pivot: f64::NAN,
        })?;
        let mut s = T::zero();
        for i in 0..q {
            s += chol.l_dirty()[(i, i)].ln();
        }
        Ok(s + s)
    };
    let sigma_chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite {
        what: "Sigma".into(),
        pivot: f64::NAN,
    })?;
    let ln_det_sigma = {
        let mut s = T::zero();
        for i in 0..q {
            s += sigma_chol.l_dirty()[(i, i)].ln();
        }
        s + s
    };
    let trace_term = sigma_chol.solve(phi).trace();
    Ok(half * eta * ln_det(phi, "prior scale Phi")?
        - half * eta * T::of_usize(q) * T::of(2.0_f64.ln())
        - ln_multivariate_gamma(q, half * eta)
        - half * (eta + T::of_usize(q) + T::one()) * ln_det_sigma
        - half * trace_term)
}

/// Log-prior of the parameters, including every hyperparameter-dependent
/// normalizing constant (the outer marginal-likelihood optimization varies
/// those). The design supplies the level counts that fix the
/// inverse-Wishart degrees of freedom.
///
/// Improper components (`lambda = 0`, `alpha = 0`, `b_r = 0`) contribute
/// zero; a Dirac component (`b_r = 1`) also contributes zero since it only
/// constrains the M-step.
pub fn log_prior<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
    prior: &PriorSpec<T>,
) -> Result<T> {
    if prior.effects.len() != params.sigmas.len() {
        return Err(Error::DimensionMismatch {
            what: "prior effects vs covariances".into(),
            expected: params.sigmas.len(),
            got: prior.effects.len(),
        });
    }
    let half = T::of(0.5);
    let ln2pi = T::of((2.0 * std::f64::consts::PI).ln());
    let mut lp = T::zero();

    if prior.lambda > T::zero() {
        let p = T::of_usize(params.beta.len());
        lp += half * p * prior.lambda.ln()
            - half * p * (ln2pi + params.sigma2.ln())
            - prior.lambda / (T::of(2.0) * params.sigma2) * params.beta.norm_squared();
    }

    if prior.alpha > T::zero() {
        let a = prior.alpha;
        lp +=
            a * a.ln() - ln_abs_gamma(a) - (a + T::one()) * params.sigma2.ln() - a / params.sigma2;
    }

    for (r, (sigma, eff)) in params.sigmas.iter().zip(&prior.effects).enumerate() {
        let b = eff.strength;
        if b == T::zero() || b == T::one() {
            continue;
        }
        if eff.mode.nrows() != sigma.nrows() {
            return Err(Error::DimensionMismatch {
                what: format!("prior mode A[{r}] vs Sigma[{r}]"),
                expected: sigma.nrows(),
                got: eff.mode.nrows(),
            });
        }
        let m = design.effect(r).levels();
        lp += inverse_wishart_log_density(sigma, eff.eta(m), &eff.phi(m))?;
    }
    Ok(lp)
}

/// Log of the unnormalized posterior: `log f(y | theta) + log pi(theta | Theta)`.
pub fn log_posterior_unnormalized<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
    prior: &PriorSpec<T>,
) -> Result<T> {
    Ok(log_likelihood(design, params)? + log_prior(design, params, prior)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::RandomEffectSpec;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn intercept_design(n: usize, groups: Vec<usize>, m: usize) -> ModelDesign<f64> {
        let y = DVector::from_fn(n, |i, _| i as f64 * 0.5 - 1.0);
        let x = DMatrix::from_element(n, 1, 1.0);
        let u = DMatrix::from_element(n, 1, 1.0);
        let eff = RandomEffectSpec::new(groups, m, u).unwrap();
        ModelDesign::new(y, x, vec![eff]).unwrap()
    }

    #[test]
    fn no_effects_gives_scaled_identity() {
        let y = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let x = DMatrix::from_element(3, 1, 1.0);
        let d = ModelDesign::new(y, x, vec![]).unwrap();
        let p = ModelParams::new(DVector::zeros(1), vec![], 1.0).unwrap();
        let v = assemble_marginal_covariance(&d, &p).unwrap();
        assert_eq!(v, DMatrix::identity(3, 3));
    }

    #[test]
    fn single_level_intercept_is_identity_plus_tau2_ones() {
        // V = I + 2 J for three observations in one level, tau2 = 2.
        let d = intercept_design(3, vec![0, 0, 0], 1);
        let p = ModelParams::new(
            DVector::zeros(1),
            vec![DMatrix::from_element(1, 1, 2.0)],
            1.0,
        )
        .unwrap();
        let v = assemble_marginal_covariance(&d, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 3.0 } else { 2.0 };
                assert_relative_eq!(v[(i, j)], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn standard_normal_log_density_at_zero() {
        let y = DVector::from_vec(vec![0.0]);
        let x = DMatrix::from_element(1, 1, 1.0);
        let d = ModelDesign::new(y, x, vec![]).unwrap();
        let p = ModelParams::new(DVector::zeros(1), vec![], 1.0).unwrap();
        let ll = log_likelihood(&d, &p).unwrap();
        assert_relative_eq!(ll, -0.9189385332046727, epsilon = 1e-9);
    }

    #[test]
    fn flat_prior_contributes_nothing() {
        let d = intercept_design(4, vec![0, 0, 1, 1], 2);
        let p = ModelParams::new(
            DVector::zeros(1),
            vec![DMatrix::from_element(1, 1, 0.5)],
            1.3,
        )
        .unwrap();
        let prior = PriorSpec::flat(&[1]);
        assert_eq!(log_prior(&d, &p, &prior).unwrap(), 0.0);
        assert_relative_eq!(
            log_posterior_unnormalized(&d, &p, &prior).unwrap(),
            log_likelihood(&d, &p).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn gaussian_block_at_zero_beta() {
        // With beta = 0 the fixed-effect block is (p/2) log lambda - (p/2) log(2 pi sigma2).
        let d = intercept_design(4, vec![0, 0, 1, 1], 2);
        let sigma2 = 1.7;
        let lambda = 2.5;
        let p = ModelParams::new(
            DVector::zeros(1),
            vec![DMatrix::from_element(1, 1, 0.5)],
            sigma2,
        )
        .unwrap();
        let mut prior: PriorSpec<f64> = PriorSpec::flat(&[1]);
        prior.lambda = lambda;
        let expected = 0.5 * lambda.ln() - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
        assert_relative_eq!(log_prior(&d, &p, &prior).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn scalar_inverse_wishart_matches_inverse_gamma() {
        // IW(eta, phi) on a 1x1 matrix equals IG(eta/2, phi/2).
        let eta = 5.0_f64;
        let phi = 3.0_f64;
        let x = 0.8_f64;
        let iw = inverse_wishart_log_density(
            &DMatrix::from_element(1, 1, x),
            eta,
            &DMatrix::from_element(1, 1, phi),
        )
        .unwrap();
        let a = eta / 2.0;
        let b = phi / 2.0;
        let ig = a * b.ln() - ln_abs_gamma(a) - (a + 1.0) * x.ln() - b / x;
        assert_relative_eq!(iw, ig, epsilon = 1e-11);
    }

    #[test]
    fn log_posterior_is_sum_of_parts() {
        let d = intercept_design(4, vec![0, 1, 0, 1], 2);
        let p = ModelParams::new(
            DVector::from_vec(vec![0.3]),
            vec![DMatrix::from_element(1, 1, 0.6)],
            0.9,
        )
        .unwrap();
        let prior = PriorSpec::new(
            0.7,
            1e-3,
            vec![crate::params::EffectPrior::new(DMatrix::identity(1, 1), 0.4).unwrap()],
        )
        .unwrap();
        let lp = log_posterior_unnormalized(&d, &p, &prior).unwrap();
        let sum = log_likelihood(&d, &p).unwrap() + log_prior(&d, &p, &prior).unwrap();
        assert_relative_eq!(lp, sum, epsilon = 1e-14);
    }
}
