//! EM algorithm for the MAP estimator (maximum likelihood as the
//! flat-prior special case).
//!
//! The E-step conditions the random effects on the data; the M-step has
//! closed-form updates: a ridge solve for the fixed effect, a convex blend
//! of prior mode and data term for each covariance, and a scalar update for
//! the error variance. One Cholesky factorization of `V` per iteration
//! serves the log-posterior trace, the E-step and the M-step.

use nalgebra::{DMatrix, DVector};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::likelihood::{assemble_marginal_covariance, check_compatible, VFactor};
use crate::params::{
    ConditionalMoments, FitFlags, FitResult, LevelMoments, ModelParams, PriorSpec,
};
use crate::scalar::Real;

/// EM stopping rule and initialization.
#[derive(Debug, Clone)]
pub struct EmSettings<T: Real> {
    pub max_iterations: usize,
    /// Tolerance on the relative change `|dl| / (1 + |l|)` of the
    /// log-posterior between iterations.
    pub tolerance: T,
    pub init: EmInit<T>,
}

/// Starting point of the EM iteration.
#[derive(Debug, Clone)]
pub enum EmInit<T: Real> {
    /// Ridge/OLS fixed effect, variance of `y` split evenly between the
    /// error term and the random effects.
    Heuristic,
    /// Caller-supplied starting parameters.
    Params(ModelParams<T>),
}

impl<T: Real> Default for EmSettings<T> {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: T::of(1e-8),
            init: EmInit::Heuristic,
        }
    }
}

impl<T: Real> EmSettings<T> {
    pub fn with_tolerance(mut self, tol: T) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_init(mut self, params: ModelParams<T>) -> Self {
        self.init = EmInit::Params(params);
        self
    }
}

/// Which parameter groups an EM fit may update; frozen groups keep their
/// starting values. Used by the coordinate-restricted Laplace evaluation.
#[derive(Debug, Clone)]
pub(crate) struct GroupMask {
    pub beta: bool,
    pub sigmas: Vec<bool>,
    pub sigma2: bool,
}

impl GroupMask {
    pub fn all(n_effects: usize) -> Self {
        Self {
            beta: true,
            sigmas: vec![true; n_effects],
            sigma2: true,
        }
    }
}

/// Factorized marginal covariance plus the per-iteration solves shared by
/// the likelihood, E-step and M-step.
pub(crate) struct VState<T: Real> {
    pub factor: VFactor<T>,
    pub v_inv: DMatrix<T>,
    pub resid: DVector<T>,
    /// `V^{-1} (y - X beta)`.
    pub w: DVector<T>,
    pub tr_v_inv: T,
}

impl<T: Real> VState<T> {
    pub fn new(design: &ModelDesign<T>, params: &ModelParams<T>) -> Result<Self> {
        let v = assemble_marginal_covariance(design, params)?;
        let factor = VFactor::new(v)?;
        let v_inv = factor.inverse();
        let resid = design.y() - design.x() * &params.beta;
        let w = &v_inv * &resid;
        let tr_v_inv = v_inv.trace();
        Ok(Self {
            factor,
            v_inv,
            resid,
            w,
            tr_v_inv,
        })
    }

    pub fn log_likelihood(&self, n: usize) -> T {
        let half = T::of(0.5);
        -half * T::of_usize(n) * T::of((2.0 * std::f64::consts::PI).ln())
            - half * self.factor.log_det()
            - half * self.resid.dot(&self.w)
    }
}

/// Conditional mean and second moment of every random-effect level given
/// the data, at the supplied parameters. `V` is factorized once and reused
/// across all levels.
pub fn e_step<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
) -> Result<ConditionalMoments<T>> {
    check_compatible(design, params)?;
    let state = VState::new(design, params)?;
    Ok(e_step_with(design, params, &state))
}

pub(crate) fn e_step_with<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
    state: &VState<T>,
) -> ConditionalMoments<T> {
    let mut effects = Vec::with_capacity(design.n_effects());
    for (r, eff) in design.effects().iter().enumerate() {
        let sigma = &params.sigmas[r];
        let mut levels = Vec::with_capacity(eff.levels());
        for j in 0..eff.levels() {
            let rows = eff.rows_of_level(j);
            let u = eff.level_block(j);
            // mu = Sigma U_j^T V^{-1} (y - X beta), gathering the rows of
            // level j from the precomputed solve.
            let wj = DVector::from_iterator(rows.len(), rows.iter().map(|&i| state.w[i]));
            let mu = sigma * (u.transpose() * wj);
            // U_j^T V^{-1} U_j through the gathered block of V^{-1}.
            let vinv_block = DMatrix::from_fn(rows.len(), rows.len(), |a, b| {
                state.v_inv[(rows[a], rows[b])]
            });
            let g = u.transpose() * vinv_block * &u;
            let omega = sigma - sigma * g * sigma + &mu * mu.transpose();
            levels.push(LevelMoments { mu, omega });
        }
        effects.push(levels);
    }
    ConditionalMoments { effects }
}

/// MAP M-step: closed-form maximizer of the E-step surrogate, given moments
/// computed at `current`.
pub fn m_step_map<T: Real>(
    design: &ModelDesign<T>,
    moments: &ConditionalMoments<T>,
    prior: &PriorSpec<T>,
    current: &ModelParams<T>,
) -> Result<ModelParams<T>> {
    check_compatible(design, current)?;
    let state = VState::new(design, current)?;
    let xtx = ridge_normal_matrix(design, prior.lambda);
    m_step_with(
        design,
        moments,
        prior,
        current,
        &state,
        &xtx,
        &GroupMask::all(design.n_effects()),
    )
}

/// `X^T X + lambda I`, the normal matrix of the fixed-effect update.
fn ridge_normal_matrix<T: Real>(design: &ModelDesign<T>, lambda: T) -> DMatrix<T> {
    let mut xtx = design.x().transpose() * design.x();
    if lambda > T::zero() {
        for i in 0..design.p() {
            xtx[(i, i)] += lambda;
        }
    }
    xtx
}

pub(crate) fn m_step_with<T: Real>(
    design: &ModelDesign<T>,
    moments: &ConditionalMoments<T>,
    prior: &PriorSpec<T>,
    current: &ModelParams<T>,
    state: &VState<T>,
    xtx: &DMatrix<T>,
    mask: &GroupMask,
) -> Result<ModelParams<T>> {
    let n = design.n();

    // Fitted random-effect contribution s = sum_{r,j} U_{r,j} mu_{r,j}.
    let mut s = DVector::zeros(n);
    for (r, eff) in design.effects().iter().enumerate() {
        for j in 0..eff.levels() {
            let u = eff.level_block(j);
            let contrib = u * &moments.effects[r][j].mu;
            for (bi, &i) in eff.rows_of_level(j).iter().enumerate() {
                s[i] += contrib[bi];
            }
        }
    }

    let beta = if mask.beta {
        let rhs = design.x().transpose() * (design.y() - &s);
        nalgebra::Cholesky::new(xtx.clone())
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::SingularSystem {
                what: "fixed-effect update X^T X + lambda I".into(),
                hint: "X is rank deficient; set lambda > 0".into(),
            })?
    } else {
        current.beta.clone()
    };

    let mut sigmas = Vec::with_capacity(current.sigmas.len());
    for (r, eff) in design.effects().iter().enumerate() {
        if !mask.sigmas[r] {
            sigmas.push(current.sigmas[r].clone());
            continue;
        }
        let b = prior.effects[r].strength;
        let m = T::of_usize(eff.levels());
        let q = eff.dim();
        let mut data_term = DMatrix::zeros(q, q);
        for lm in &moments.effects[r] {
            data_term += &lm.omega;
        }
        data_term /= m;
        // Convex blend of prior mode and data term; b = 0 is the
        // likelihood update, b = 1 pins the covariance to the mode.
        let sigma = &prior.effects[r].mode * b + data_term * (T::one() - b);
        sigmas.push(sigma);
    }

    let sigma2 = if mask.sigma2 {
        // E || y - X beta - sum U gamma ||^2 given the data equals
        // || y - X beta - s ||^2 + sigma2_k (n - sigma2_k tr V^{-1}),
        // the second term being the trace of the conditional covariance of
        // the fitted random-effect contribution.
        let fit_resid = design.y() - design.x() * &beta - &s;
        let cond_trace = current.sigma2 * (T::of_usize(n) - current.sigma2 * state.tr_v_inv);
        let mut numer = fit_resid.norm_squared() + cond_trace;
        let mut denom = T::of_usize(n);
        if prior.lambda > T::zero() {
            numer += prior.lambda * beta.norm_squared();
            denom += T::of_usize(design.p());
        }
        if prior.alpha > T::zero() {
            numer += T::of(2.0) * prior.alpha;
            denom += T::of(2.0) * (prior.alpha + T::one());
        }
        numer / denom
    } else {
        current.sigma2
    };

    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::invalid(
            "sigma2 update",
            format!("produced non-positive value {}", sigma2.as_f64()),
        ));
    }

    Ok(ModelParams {
        beta,
        sigmas,
        sigma2,
    })
}

fn heuristic_init<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
) -> Result<ModelParams<T>> {
    let n = design.n();
    let xtx = ridge_normal_matrix(design, prior.lambda);
    let rhs = design.x().transpose() * design.y();
    let beta = nalgebra::Cholesky::new(xtx)
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::SingularSystem {
            what: "initial fixed-effect solve X^T X + lambda I".into(),
            hint: "X is rank deficient; set lambda > 0".into(),
        })?;
    let mean = design.y().sum() / T::of_usize(n);
    let var = if n > 1 {
        design
            .y()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |a, b| a + b)
            / T::of_usize(n - 1)
    } else {
        T::one()
    };
    // Keep the starting covariances positive even for degenerate data.
    let var = var.max(T::of(1e-6));
    let share = var / T::of_usize(design.n_effects() + 1);
    let sigmas = design
        .effects()
        .iter()
        .map(|eff| DMatrix::from_diagonal_element(eff.dim(), eff.dim(), share))
        .collect();
    Ok(ModelParams {
        beta,
        sigmas,
        sigma2: share,
    })
}

/// MAP fit by EM under the given prior.
///
/// Non-convergence within `max_iterations` is not an error: the result is
/// returned with `converged = false`. The log-posterior trace is recorded
/// at every iterate, starting with the initial point.
pub fn fit_map<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
    settings: &EmSettings<T>,
) -> Result<FitResult<T>> {
    fit_map_masked(design, prior, settings, &GroupMask::all(design.n_effects()))
}

pub(crate) fn fit_map_masked<T: Real>(
    design: &ModelDesign<T>,
    prior: &PriorSpec<T>,
    settings: &EmSettings<T>,
    mask: &GroupMask,
) -> Result<FitResult<T>> {
    if prior.effects.len() != design.n_effects() {
        return Err(Error::DimensionMismatch {
            what: "prior effects vs design random effects".into(),
            expected: design.n_effects(),
            got: prior.effects.len(),
        });
    }
    if settings.max_iterations == 0 {
        return Err(Error::invalid("max_iterations", "must be at least 1"));
    }
    if !(settings.tolerance > T::zero()) {
        return Err(Error::invalid("tolerance", "must be positive"));
    }

    let mut params = match &settings.init {
        EmInit::Heuristic => heuristic_init(design, prior)?,
        EmInit::Params(p) => {
            check_compatible(design, p)?;
            p.clone()
        }
    };

    let xtx = ridge_normal_matrix(design, prior.lambda);
    let mut trace: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let state = VState::new(design, &params)?;
        let lp = state.log_likelihood(design.n())
            + crate::likelihood::log_prior(design, &params, prior)?;
        if let Some(&prev) = trace.last() {
            trace.push(lp);
            let change = (lp - prev).abs() / (T::one() + lp.abs());
            if change < settings.tolerance {
                converged = true;
                break;
            }
        } else {
            trace.push(lp);
        }
        // A non-finite log-posterior cannot come from the updates (they keep
        // V positive definite); it is a theta-independent pole of the prior
        // normalizing constant, so iterating further cannot recover.
        if !lp.is_finite() {
            break;
        }
        if iterations >= settings.max_iterations {
            break;
        }
        let moments = e_step_with(design, &params, &state);
        params = m_step_with(design, &moments, prior, &params, &state, &xtx, mask)?;
        iterations += 1;
    }

    let flags = FitFlags {
        improper_beta_prior: prior.lambda == T::zero(),
        improper_sigma2_prior: prior.alpha == T::zero(),
        ..FitFlags::default()
    };
    Ok(FitResult {
        params,
        log_posterior_trace: trace,
        iterations,
        converged,
        prior: prior.clone(),
        marginal_log_likelihood: None,
        flags,
    })
}

/// Maximum-likelihood fit: the same EM loop under the flat prior.
pub fn fit_ml<T: Real>(design: &ModelDesign<T>, settings: &EmSettings<T>) -> Result<FitResult<T>> {
    let qs: Vec<usize> = design.effects().iter().map(|e| e.dim()).collect();
    fit_map(design, &PriorSpec::flat(&qs), settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::RandomEffectSpec;
    use approx::assert_relative_eq;

    fn intercept_effect(groups: Vec<usize>, m: usize) -> RandomEffectSpec<f64> {
        let n = groups.len();
        RandomEffectSpec::new(groups, m, DMatrix::from_element(n, 1, 1.0)).unwrap()
    }

    #[test]
    fn e_step_zero_covariates_gives_prior_moments() {
        // A level whose covariate rows are all zero carries no information:
        // mu = 0 and Omega = Sigma.
        let n = 4;
        let y = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5]);
        let x = DMatrix::from_element(n, 1, 1.0);
        let mut u = DMatrix::from_element(n, 1, 1.0);
        u[(2, 0)] = 0.0;
        u[(3, 0)] = 0.0;
        let eff = RandomEffectSpec::new(vec![0, 0, 1, 1], 2, u).unwrap();
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let params = ModelParams::new(
            DVector::zeros(1),
            vec![DMatrix::from_element(1, 1, 0.7)],
            1.0,
        )
        .unwrap();
        let moments = e_step(&design, &params).unwrap();
        let lm = &moments.effects[0][1];
        assert_relative_eq!(lm.mu[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(lm.omega[(0, 0)], 0.7, epsilon = 1e-14);
    }

    #[test]
    fn e_step_single_group_matches_shrinkage_formula() {
        // One group of m observations with a random intercept:
        // mu = m tau2 mean(resid) / (sigma2 + m tau2).
        let m = 5;
        let tau2 = 2.0;
        let sigma2 = 1.5;
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -0.5, 3.0]);
        let x = DMatrix::from_element(m, 1, 1.0);
        let beta = DVector::from_vec(vec![0.4]);
        let eff = intercept_effect(vec![0; m], 1);
        let design = ModelDesign::new(y.clone(), x, vec![eff]).unwrap();
        let params = ModelParams::new(
            beta.clone(),
            vec![DMatrix::from_element(1, 1, tau2)],
            sigma2,
        )
        .unwrap();
        let moments = e_step(&design, &params).unwrap();
        let resid_mean = (y.sum() - m as f64 * beta[0]) / m as f64;
        let expected = m as f64 * tau2 * resid_mean / (sigma2 + m as f64 * tau2);
        assert_relative_eq!(moments.effects[0][0].mu[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn dirac_prior_pins_covariance_to_mode() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let eff = intercept_effect(vec![0, 0, 1, 1], 2);
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let a = DMatrix::from_element(1, 1, 3.25);
        let prior = PriorSpec::new(
            0.0,
            0.0,
            vec![crate::params::EffectPrior::new(a.clone(), 1.0).unwrap()],
        )
        .unwrap();
        let current = ModelParams::new(
            DVector::zeros(1),
            vec![DMatrix::from_element(1, 1, 0.5)],
            1.0,
        )
        .unwrap();
        let moments = e_step(&design, &current).unwrap();
        let updated = m_step_map(&design, &moments, &prior, &current).unwrap();
        assert_eq!(updated.sigmas[0][(0, 0)], a[(0, 0)]);

        let fit = fit_map(&design, &prior, &EmSettings::default()).unwrap();
        assert_eq!(fit.params.sigmas[0][(0, 0)], a[(0, 0)]);
    }

    #[test]
    fn ridge_regression_without_random_effects() {
        // R = 0 with lambda > 0 converges to the ridge solution in at most
        // two iterations.
        let n = 8;
        let y = DVector::from_fn(n, |i, _| (i as f64) * 0.7 - 2.0);
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { (i as f64).sin() });
        let design = ModelDesign::new(y.clone(), x.clone(), vec![]).unwrap();
        let lambda = 0.9;
        let prior = PriorSpec::new(lambda, 0.0, vec![]).unwrap();
        let fit = fit_map(&design, &prior, &EmSettings::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "took {} iterations", fit.iterations);
        let mut xtx = x.transpose() * &x;
        xtx[(0, 0)] += lambda;
        xtx[(1, 1)] += lambda;
        let expected = nalgebra::Cholesky::new(xtx)
            .unwrap()
            .solve(&(x.transpose() * &y));
        assert_relative_eq!(fit.params.beta[0], expected[0], epsilon = 1e-10);
        assert_relative_eq!(fit.params.beta[1], expected[1], epsilon = 1e-10);
    }

    #[test]
    fn flat_map_equals_ml() {
        let y = DVector::from_vec(vec![1.0, 2.0, 1.5, 3.0, 2.5, 0.5]);
        let x = DMatrix::from_element(6, 1, 1.0);
        let eff = intercept_effect(vec![0, 0, 1, 1, 2, 2], 3);
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let flat = PriorSpec::flat(&[1]);
        let settings = EmSettings::default();
        let a = fit_map(&design, &flat, &settings).unwrap();
        let b = fit_ml(&design, &settings).unwrap();
        assert_eq!(a.log_posterior_trace.len(), b.log_posterior_trace.len());
        for (u, v) in a.log_posterior_trace.iter().zip(&b.log_posterior_trace) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn trace_is_monotone() {
        let y = DVector::from_vec(vec![2.0, -1.0, 0.5, 3.0, 1.0, -0.5, 2.5, 1.5]);
        let x = DMatrix::from_fn(8, 2, |i, c| if c == 0 { 1.0 } else { (i % 3) as f64 });
        let eff = intercept_effect(vec![0, 0, 0, 1, 1, 1, 2, 2], 3);
        let design = ModelDesign::new(y, x, vec![eff]).unwrap();
        let prior = PriorSpec::new(
            0.5,
            1e-3,
            vec![crate::params::EffectPrior::new(DMatrix::identity(1, 1), 0.3).unwrap()],
        )
        .unwrap();
        let fit = fit_map(&design, &prior, &EmSettings::default()).unwrap();
        assert!(fit.converged);
        for w in fit.log_posterior_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }
}
