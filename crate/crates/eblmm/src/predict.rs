//! Conditional prediction of new outcomes, fixed-effect covariance, and
//! evaluation metrics.
//!
//! New observations may reuse observed grouping levels or introduce fresh
//! ones. Fresh levels contribute their covariance to the predictive
//! variance but have zero cross-covariance with the observed data.

use nalgebra::{DMatrix, DVector};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::likelihood::{assemble_marginal_covariance, check_compatible, VFactor};
use crate::params::ModelParams;
use crate::scalar::Real;

/// Random-effect structure of the new observations for one effect: level
/// index per new observation (`< m_r` reuses the observed level, `>= m_r`
/// is fresh) and the covariate rows.
#[derive(Debug, Clone)]
pub struct NewEffect<T: Real> {
    pub groups: Vec<usize>,
    pub u: DMatrix<T>,
}

/// Observed data plus the design of the outcomes to predict.
#[derive(Debug, Clone)]
pub struct PredictionProblem<T: Real> {
    observed: ModelDesign<T>,
    x_new: DMatrix<T>,
    effects: Vec<NewEffect<T>>,
}

impl<T: Real> PredictionProblem<T> {
    pub fn new(
        observed: ModelDesign<T>,
        x_new: DMatrix<T>,
        effects: Vec<NewEffect<T>>,
    ) -> Result<Self> {
        let n_new = x_new.nrows();
        if n_new == 0 {
            return Err(Error::invalid("X_new", "needs at least one row"));
        }
        if x_new.ncols() != observed.p() {
            return Err(Error::DimensionMismatch {
                what: "X_new columns".into(),
                expected: observed.p(),
                got: x_new.ncols(),
            });
        }
        if effects.len() != observed.n_effects() {
            return Err(Error::DimensionMismatch {
                what: "new random effects".into(),
                expected: observed.n_effects(),
                got: effects.len(),
            });
        }
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("X_new"));
        }
        for (r, eff) in effects.iter().enumerate() {
            if eff.groups.len() != n_new {
                return Err(Error::DimensionMismatch {
                    what: format!("new group assignments of effect {r}"),
                    expected: n_new,
                    got: eff.groups.len(),
                });
            }
            if eff.u.nrows() != n_new || eff.u.ncols() != observed.effect(r).dim() {
                return Err(Error::DimensionMismatch {
                    what: format!("U_new of effect {r}"),
                    expected: observed.effect(r).dim(),
                    got: eff.u.ncols(),
                });
            }
            if eff.u.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("U_new of effect {r}")));
            }
        }
        Ok(Self {
            observed,
            x_new,
            effects,
        })
    }

    pub fn observed(&self) -> &ModelDesign<T> {
        &self.observed
    }

    pub fn n_new(&self) -> usize {
        self.x_new.nrows()
    }
}

/// Gaussian predictive law of the new outcomes.
#[derive(Debug, Clone)]
pub struct GaussianPredictive<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

/// Condition the new outcomes on the observed ones under the fitted
/// parameters. Cross-covariance accumulates only over shared levels.
pub fn predict_conditional<T: Real>(
    problem: &PredictionProblem<T>,
    params: &ModelParams<T>,
) -> Result<GaussianPredictive<T>> {
    let obs = &problem.observed;
    check_compatible(obs, params)?;
    let n_new = problem.n_new();
    let n_obs = obs.n();

    // V_nn: sigma2 I plus the covariance among new observations sharing a
    // level (observed or fresh).
    let mut v_nn = DMatrix::from_diagonal_element(n_new, n_new, params.sigma2);
    for (r, eff) in problem.effects.iter().enumerate() {
        let sigma = &params.sigmas[r];
        for i in 0..n_new {
            for j in 0..n_new {
                if eff.groups[i] == eff.groups[j] {
                    let ui = eff.u.row(i);
                    let uj = eff.u.row(j);
                    v_nn[(i, j)] += (ui * sigma * uj.transpose())[(0, 0)];
                }
            }
        }
    }

    // Cross-covariance with the observed data: shared levels only.
    let mut c_no = DMatrix::zeros(n_new, n_obs);
    for (r, eff) in problem.effects.iter().enumerate() {
        let sigma = &params.sigmas[r];
        let obs_eff = obs.effect(r);
        for i in 0..n_new {
            let level = eff.groups[i];
            if level >= obs_eff.levels() {
                continue; // fresh level
            }
            let ui = eff.u.row(i);
            for &i2 in obs_eff.rows_of_level(level) {
                let u2 = obs_eff.covariates().row(i2);
                c_no[(i, i2)] += (ui * sigma * u2.transpose())[(0, 0)];
            }
        }
    }

    let v_oo = assemble_marginal_covariance(obs, params)?;
    let f = VFactor::new(v_oo)?;
    let resid = obs.y() - obs.x() * &params.beta;
    let w = f.solve_vec(&resid);
    let mean = &problem.x_new * &params.beta + &c_no * w;

    let solved = f.solve_mat(&c_no.transpose());
    let mut covariance = v_nn - &c_no * solved;
    for i in 0..n_new {
        for j in 0..i {
            let v = (covariance[(i, j)] + covariance[(j, i)]) / T::of(2.0);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }

    Ok(GaussianPredictive { mean, covariance })
}

/// Covariance of the generalized-least-squares fixed-effect estimator,
/// `[X^T V^{-1} X]^{-1}`.
pub fn fixed_effect_covariance<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
) -> Result<DMatrix<T>> {
    let v = assemble_marginal_covariance(design, params)?;
    let f = VFactor::new(v)?;
    let vinv_x = f.solve_mat(design.x());
    let info = design.x().transpose() * vinv_x;
    nalgebra::Cholesky::new(info)
        .map(|c| {
            let mut inv = c.inverse();
            for i in 0..inv.nrows() {
                for j in 0..i {
                    let v = (inv[(i, j)] + inv[(j, i)]) / T::of(2.0);
                    inv[(i, j)] = v;
                    inv[(j, i)] = v;
                }
            }
            inv
        })
        .ok_or_else(|| Error::SingularSystem {
            what: "X^T V^{-1} X".into(),
            hint: "X is rank deficient".into(),
        })
}

/// Closed-form Kullback–Leibler divergence `KL(p || q)` between Gaussians.
pub fn kl_gaussian<T: Real>(
    p: &GaussianPredictive<T>,
    q: &GaussianPredictive<T>,
) -> Result<T> {
    let k = p.mean.len();
    if q.mean.len() != k || p.covariance.nrows() != k || q.covariance.nrows() != k {
        return Err(Error::DimensionMismatch {
            what: "KL operands".into(),
            expected: k,
            got: q.mean.len(),
        });
    }
    let chol_q = nalgebra::Cholesky::new(q.covariance.clone()).ok_or(
        Error::NotPositiveDefinite {
            what: "covariance of q".into(),
            pivot: f64::NAN,
        },
    )?;
    let chol_p = nalgebra::Cholesky::new(p.covariance.clone()).ok_or(
        Error::NotPositiveDefinite {
            what: "covariance of p".into(),
            pivot: f64::NAN,
        },
    )?;
    let log_det = |c: &nalgebra::Cholesky<T, nalgebra::Dyn>| {
        let mut s = T::zero();
        for i in 0..k {
            s += c.l_dirty()[(i, i)].ln();
        }
        s + s
    };
    let trace = chol_q.solve(&p.covariance).trace();
    let dm = &q.mean - &p.mean;
    let quad = dm.dot(&chol_q.solve(&dm));
    Ok((trace + quad - T::of_usize(k) + log_det(&chol_q) - log_det(&chol_p)) / T::of(2.0))
}

/// Squared error divided by the number of entries.
pub fn mean_squared_error<T: Real>(a: &DVector<T>, b: &DVector<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "error operands".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok((a - b).norm_squared() / T::of_usize(a.len()))
}

/// Plain squared error, no divisor.
pub fn sum_squared_error<T: Real>(a: &DVector<T>, b: &DVector<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "error operands".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok((a - b).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::RandomEffectSpec;
    use approx::assert_relative_eq;

    fn intercept_problem(
        y: Vec<f64>,
        groups_obs: Vec<usize>,
        m: usize,
        groups_new: Vec<usize>,
    ) -> PredictionProblem<f64> {
        let n = y.len();
        let n_new = groups_new.len();
        let x = DMatrix::from_element(n, 1, 1.0);
        let eff = RandomEffectSpec::new(groups_obs, m, DMatrix::from_element(n, 1, 1.0)).unwrap();
        let observed = ModelDesign::new(DVector::from_vec(y), x, vec![eff]).unwrap();
        PredictionProblem::new(
            observed,
            DMatrix::from_element(n_new, 1, 1.0),
            vec![NewEffect {
                groups: groups_new,
                u: DMatrix::from_element(n_new, 1, 1.0),
            }],
        )
        .unwrap()
    }

    fn intercept_params(tau2: f64, sigma2: f64, beta: f64) -> ModelParams<f64> {
        ModelParams::new(
            DVector::from_vec(vec![beta]),
            vec![DMatrix::from_element(1, 1, tau2)],
            sigma2,
        )
        .unwrap()
    }

    #[test]
    fn fresh_levels_have_no_cross_information() {
        let problem = intercept_problem(vec![1.0, 2.0, 3.0], vec![0, 0, 0], 1, vec![1, 1]);
        let params = intercept_params(2.0, 1.0, 0.5);
        let pred = predict_conditional(&problem, &params).unwrap();
        assert_relative_eq!(pred.mean[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(pred.mean[1], 0.5, epsilon = 1e-14);
        // Covariance equals the marginal law of the new design: both new
        // observations share the fresh level.
        assert_relative_eq!(pred.covariance[(0, 0)], 3.0, epsilon = 1e-14);
        assert_relative_eq!(pred.covariance[(0, 1)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn shared_intercept_level_hand_computation() {
        // Two observed points in one level, one new point in the same
        // level; sigma2 = 1, tau2 = 2, beta = 0, y = (1, 2):
        // V_oo = [[3,2],[2,3]], C_no = [2,2], V_nn = 3.
        // mean = [2,2] V_oo^{-1} y = 1.2; var = 3 - [2,2] V_oo^{-1} [2,2]^T = 1.4.
        let problem = intercept_problem(vec![1.0, 2.0], vec![0, 0], 1, vec![0]);
        let params = intercept_params(2.0, 1.0, 0.0);
        let pred = predict_conditional(&problem, &params).unwrap();
        assert_relative_eq!(pred.mean[0], 1.2, epsilon = 1e-12);
        assert_relative_eq!(pred.covariance[(0, 0)], 1.4, epsilon = 1e-12);
    }

    #[test]
    fn ols_covariance_without_random_effects() {
        let n = 6;
        let y = DVector::from_fn(n, |i, _| i as f64);
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { (i as f64) - 2.0 });
        let design = ModelDesign::new(y, x.clone(), vec![]).unwrap();
        let sigma2 = 1.7;
        let params = ModelParams::new(DVector::zeros(2), vec![], sigma2).unwrap();
        let c = fixed_effect_covariance(&design, &params).unwrap();
        let expected = (x.transpose() * &x).try_inverse().unwrap() * sigma2;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(c[(i, j)], expected[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_scales_inverse_quadratically_in_x() {
        let n = 6;
        let y = DVector::from_fn(n, |i, _| i as f64);
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { (i as f64) - 2.0 });
        let params = ModelParams::new(DVector::zeros(2), vec![], 0.9).unwrap();
        let d1 = ModelDesign::new(y.clone(), x.clone(), vec![]).unwrap();
        let d2 = ModelDesign::new(y, x * 2.0, vec![]).unwrap();
        let c1 = fixed_effect_covariance(&d1, &params).unwrap();
        let c2 = fixed_effect_covariance(&d2, &params).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(c2[(i, j)], c1[(i, j)] / 4.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = GaussianPredictive {
            mean: DVector::from_vec(vec![1.0, -1.0]),
            covariance: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let kl: f64 = kl_gaussian(&p, &p.clone()).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_one_half() {
        let p = GaussianPredictive {
            mean: DVector::from_vec(vec![0.0]),
            covariance: DMatrix::from_element(1, 1, 1.0),
        };
        let q = GaussianPredictive {
            mean: DVector::from_vec(vec![1.0]),
            covariance: DMatrix::from_element(1, 1, 1.0),
        };
        assert_relative_eq!(kl_gaussian(&p, &q).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn squared_error_conventions() {
        let a = DVector::from_vec(vec![1.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0]);
        assert_relative_eq!(mean_squared_error(&a, &b).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(sum_squared_error(&a, &b).unwrap(), 2.0, epsilon = 1e-14);
        assert_eq!(mean_squared_error(&a, &a.clone()).unwrap(), 0.0);
        assert!(mean_squared_error(&a, &DVector::zeros(3)).is_err());
    }
}
