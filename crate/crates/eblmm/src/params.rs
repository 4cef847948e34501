//! Model parameters, prior specification and fit results.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

fn check_spd<T: Real>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what: format!("{what} (square)"),
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(what));
    }
    // Symmetry tolerance: 1e-10 in f64, scaled up when the scalar type is
    // coarser than that.
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs())).max(T::one());
    let tol = T::of(1e-10).max(T::default_epsilon() * T::of(100.0)) * scale;
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::invalid(
                    what.to_string(),
                    format!("not symmetric at ({i},{j})"),
                ));
            }
        }
    }
    let sym = mirror_lower(m);
    if nalgebra::Cholesky::new(sym).is_none() {
        return Err(Error::NotPositiveDefinite {
            what: what.into(),
            pivot: f64::NAN,
        });
    }
    Ok(())
}

/// Copy the lower triangle onto the upper one.
pub(crate) fn mirror_lower<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..i {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}

/// Model parameters: fixed effect, random-effect covariances, error variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub beta: DVector<T>,
    pub sigmas: Vec<DMatrix<T>>,
    pub sigma2: T,
}

impl<T: Real> ModelParams<T> {
    /// Validate the parameters: each covariance symmetric positive definite
    /// (symmetry enforced by mirroring the lower triangle), error variance
    /// positive.
    pub fn new(beta: DVector<T>, sigmas: Vec<DMatrix<T>>, sigma2: T) -> Result<Self> {
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("beta"));
        }
        if !(sigma2 > T::zero()) || !sigma2.is_finite() {
            return Err(Error::invalid("sigma2", "must be positive and finite"));
        }
        let sigmas = sigmas
            .iter()
            .enumerate()
            .map(|(r, s)| {
                check_spd(s, &format!("Sigma[{r}]"))?;
                Ok(mirror_lower(s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta,
            sigmas,
            sigma2,
        })
    }

    pub fn n_effects(&self) -> usize {
        self.sigmas.len()
    }
}

/// Prior on one random-effect covariance in mode/strength form: the
/// posterior-mode update is the convex blend
/// `b * A + (1 - b) * (data term)`.
#[derive(Debug, Clone)]
pub struct EffectPrior<T: Real> {
    /// Prior mode `A_r`, symmetric positive definite.
    pub mode: DMatrix<T>,
    /// Prior strength `b_r` in `[0, 1]`; 0 is flat, 1 pins the covariance
    /// to the mode.
    pub strength: T,
}

impl<T: Real> EffectPrior<T> {
    pub fn new(mode: DMatrix<T>, strength: T) -> Result<Self> {
        check_spd(&mode, "prior mode A")?;
        if !(strength >= T::zero() && strength <= T::one()) {
            return Err(Error::invalid("strength b", "must lie in [0, 1]"));
        }
        Ok(Self {
            mode: mirror_lower(&mode),
            strength,
        })
    }

    /// Inverse-Wishart degrees of freedom for a factor with `m` levels:
    /// `eta = b m / (1 - b) - q - 1`. Requires `b < 1`.
    pub fn eta(&self, m: usize) -> T {
        let b = self.strength;
        b * T::of_usize(m) / (T::one() - b) - T::of_usize(self.mode.nrows()) - T::one()
    }

    /// Inverse-Wishart scale matrix `Phi = (eta + q + 1) A = b m / (1 - b) A`.
    pub fn phi(&self, m: usize) -> DMatrix<T> {
        let b = self.strength;
        &self.mode * (b * T::of_usize(m) / (T::one() - b))
    }

    /// Recover mode/strength from canonical `(eta, Phi)` for a factor with
    /// `m` levels. Requires `eta + q + 1 > 0`.
    pub fn from_canonical(eta: T, phi: DMatrix<T>, m: usize) -> Result<Self> {
        let q = T::of_usize(phi.nrows());
        let denom = eta + q + T::one();
        if !(denom > T::zero()) {
            return Err(Error::invalid(
                "eta",
                "eta + q + 1 must be positive to define the mode",
            ));
        }
        let mode = &phi / denom;
        let strength = denom / (T::of_usize(m) + denom);
        EffectPrior::new(mode, strength)
    }
}

/// Full prior specification: ridge intensity on the fixed effect,
/// inverse-Gamma shape/scale on the error variance, and one
/// mode/strength pair per random effect.
///
/// The improper limits contribute nothing to the log-prior: `lambda = 0`
/// drops the fixed-effect block, `alpha = 0` drops the error-variance
/// block, `b_r = 0` drops the covariance block. With all three at zero the
/// posterior equals the likelihood and MAP estimation reduces to maximum
/// likelihood.
#[derive(Debug, Clone)]
pub struct PriorSpec<T: Real> {
    pub lambda: T,
    pub alpha: T,
    pub effects: Vec<EffectPrior<T>>,
}

/// Default inverse-Gamma shape/scale for a weakly informative error-variance
/// prior.
pub const DEFAULT_ALPHA: f64 = 1e-3;

impl<T: Real> PriorSpec<T> {
    pub fn new(lambda: T, alpha: T, effects: Vec<EffectPrior<T>>) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be nonnegative and finite"));
        }
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be nonnegative and finite"));
        }
        Ok(Self {
            lambda,
            alpha,
            effects,
        })
    }

    /// Fully flat prior for `qs.len()` random effects of the given
    /// dimensions; MAP under this prior is the maximum-likelihood fit.
    pub fn flat(qs: &[usize]) -> Self {
        Self {
            lambda: T::zero(),
            alpha: T::zero(),
            effects: qs
                .iter()
                .map(|&q| EffectPrior {
                    mode: DMatrix::identity(q, q),
                    strength: T::zero(),
                })
                .collect(),
        }
    }

    pub fn is_flat(&self) -> bool {
        self.lambda == T::zero()
            && self.alpha == T::zero()
            && self.effects.iter().all(|e| e.strength == T::zero())
    }
}

/// Conditional mean and second moment of the random effects of one level.
#[derive(Debug, Clone)]
pub struct LevelMoments<T: Real> {
    /// `mu_{r,j} = E[gamma_{r,j} | y]`.
    pub mu: DVector<T>,
    /// `Omega_{r,j} = E[gamma_{r,j} gamma_{r,j}^T | y]`.
    pub omega: DMatrix<T>,
}

/// E-step output: per effect, per level moments.
#[derive(Debug, Clone)]
pub struct ConditionalMoments<T: Real> {
    pub effects: Vec<Vec<LevelMoments<T>>>,
}

/// Diagnostics accumulated during fitting.
#[derive(Debug, Clone, Default)]
pub struct FitFlags {
    /// The fixed-effect prior was improper (`lambda = 0`).
    pub improper_beta_prior: bool,
    /// The error-variance prior was improper (`alpha = 0`).
    pub improper_sigma2_prior: bool,
    /// `-H` was not positive definite at the mode; eigenvalues were clipped
    /// for the log-determinant.
    pub hessian_clipped: bool,
    /// The error variance ended up within clipping distance of zero.
    pub sigma2_near_boundary: bool,
}

/// Result of a MAP or ML fit.
#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub params: ModelParams<T>,
    pub log_posterior_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub prior: PriorSpec<T>,
    pub marginal_log_likelihood: Option<T>,
    pub flags: FitFlags,
}

impl<T: Real> FitResult<T> {
    pub fn final_log_posterior(&self) -> T {
        *self
            .log_posterior_trace
            .last()
            .expect("trace has at least the initial value")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_asymmetric_sigma() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(ModelParams::new(DVector::zeros(1), vec![s], 1.0).is_err());
    }

    #[test]
    fn rejects_indefinite_sigma() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelParams::new(DVector::zeros(1), vec![s], 1.0).is_err());
    }

    #[test]
    fn mirrors_lower_triangle() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3 + 1e-14, 0.3, 1.0]);
        let p = ModelParams::new(DVector::zeros(1), vec![s], 1.0).unwrap();
        assert_eq!(p.sigmas[0][(0, 1)], p.sigmas[0][(1, 0)]);
    }

    #[test]
    fn strength_mode_round_trip() {
        // (A, b) -> (eta, Phi) -> (A, b) is the identity.
        for &b in &[0.01_f64, 0.5, 0.9] {
            for &q in &[1usize, 2, 3] {
                for &m in &[3usize, 60] {
                    let mut a = DMatrix::identity(q, q);
                    for i in 0..q {
                        for j in 0..q {
                            if i != j {
                                a[(i, j)] = 0.25;
                            }
                        }
                    }
                    let prior = EffectPrior::new(a.clone(), b).unwrap();
                    let eta = prior.eta(m);
                    let phi = prior.phi(m);
                    let back = EffectPrior::from_canonical(eta, phi, m).unwrap();
                    assert_relative_eq!(back.strength, b, max_relative = 1e-12);
                    for i in 0..q {
                        for j in 0..q {
                            assert_relative_eq!(back.mode[(i, j)], a[(i, j)], max_relative = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn flat_prior_is_flat() {
        let p: PriorSpec<f64> = PriorSpec::flat(&[2, 1]);
        assert!(p.is_flat());
        assert_eq!(p.effects.len(), 2);
    }
}
