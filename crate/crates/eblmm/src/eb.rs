//! Empirical-Bayes selection of the prior hyperparameters by maximizing
//! the Laplace-approximated log marginal likelihood.
//!
//! Search coordinates are transformed to make the box well scaled: logit
//! for the strengths `b_r`, log for the mode scales `a_r` and the ridge
//! intensity `lambda`. The inner MAP solves run at a tight tolerance and
//! are warm-started from the previous mode so the finite-difference
//! gradients of the outer objective stay stable.
//!
//! Below the inverse-Wishart properness boundary
//! (`b < 2 q / (m + 2 q)`) the objective uses the `log|Gamma|`
//! continuation of the normalizing constant. That surface has isolated
//! `-inf` spikes where the continued degrees of freedom hit a pole; the
//! line search rejects non-finite values, and the multistart covers the
//! basins the spikes separate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::cell::RefCell;

use crate::design::ModelDesign;
use crate::em::{EmSettings, fit_map};
use crate::error::{Error, Result};
use crate::laplace::laplace_log_marginal;
use crate::optimize::BoundedBfgs;
use crate::params::{EffectPrior, FitResult, ModelParams, PriorSpec, DEFAULT_ALPHA};
use crate::scalar::Real;

/// Structure of the prior mode searched for one random effect.
#[derive(Debug, Clone)]
pub enum ModeStructure<T: Real> {
    /// `A_r = a_r I` with the scalar `a_r` searched on the log scale.
    ScalarIdentity,
    /// User-fixed positive-definite matrix; only the strength is searched.
    FixedMatrix(DMatrix<T>),
}

/// Per-effect search configuration.
#[derive(Debug, Clone)]
pub struct EffectSearch<T: Real> {
    pub structure: ModeStructure<T>,
    /// Bounds for the strength `b_r`; the upper cap keeps the point-mass
    /// limit out of the search.
    pub strength_bounds: (T, T),
    /// Bounds for the mode scale `a_r` (scalar-identity structure only).
    pub scale_bounds: (T, T),
    /// Freeze the strength at this value instead of searching it.
    pub fixed_strength: Option<T>,
}

impl<T: Real> EffectSearch<T> {
    pub fn scalar_identity() -> Self {
        Self {
            structure: ModeStructure::ScalarIdentity,
            strength_bounds: (T::of(1e-3), T::of(0.9)),
            scale_bounds: (T::of(1e-6), T::of(1e6)),
            fixed_strength: None,
        }
    }

    pub fn with_fixed_strength(mut self, b: T) -> Self {
        self.fixed_strength = Some(b);
        self
    }
}

/// Hyperparameter search space and optimizer settings.
#[derive(Debug, Clone)]
pub struct HyperSearchSpec<T: Real> {
    pub effects: Vec<EffectSearch<T>>,
    pub optimize_lambda: bool,
    /// Bounds for `lambda` when optimized; the lower bound must be positive
    /// because the search runs on the log scale. `lambda = 0` is expressed
    /// by `optimize_lambda = false` with `lambda_fixed = 0`.
    pub lambda_bounds: (T, T),
    /// Value of `lambda` when it is not optimized.
    pub lambda_fixed: T,
    /// Inverse-Gamma shape/scale of the error-variance prior (not searched).
    pub alpha: T,
    pub multistart: usize,
    /// Tolerance of the outer optimizer on the transformed coordinates.
    pub outer_tolerance: T,
    pub max_outer_iterations: usize,
    /// EM tolerance for the inner MAP solves during the search.
    pub inner_tolerance: T,
}

impl<T: Real> HyperSearchSpec<T> {
    pub fn scalar_identity(n_effects: usize) -> Self {
        Self {
            effects: (0..n_effects).map(|_| EffectSearch::scalar_identity()).collect(),
            optimize_lambda: false,
            lambda_bounds: (T::of(1e-6), T::of(1e8)),
            lambda_fixed: T::zero(),
            alpha: T::of(DEFAULT_ALPHA),
            multistart: 3,
            outer_tolerance: T::of(1e-6),
            max_outer_iterations: 80,
            inner_tolerance: T::of(1e-10),
        }
    }

    pub fn with_lambda_search(mut self) -> Self {
        self.optimize_lambda = true;
        self
    }

    pub fn with_multistart(mut self, k: usize) -> Self {
        self.multistart = k;
        self
    }
}

fn logit<T: Real>(b: T) -> T {
    (b / (T::one() - b)).ln()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Mapping between the transformed search vector and a `PriorSpec`.
struct SearchLayout<T: Real> {
    /// (coordinate index, effect) of each searched strength.
    strength_coords: Vec<usize>,
    /// (coordinate index, effect) of each searched mode scale.
    scale_coords: Vec<(usize, usize)>,
    lambda_coord: Option<usize>,
    lower: DVector<T>,
    upper: DVector<T>,
}

impl<T: Real> SearchLayout<T> {
    fn new<U: Real>(design: &ModelDesign<U>, spec: &HyperSearchSpec<T>) -> Result<Self> {
        if spec.effects.len() != design.n_effects() {
            return Err(Error::DimensionMismatch {
                what: "hyperparameter search effects".into(),
                expected: design.n_effects(),
                got: spec.effects.len(),
            });
        }
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut strength_coords = vec![usize::MAX; spec.effects.len()];
        let mut scale_coords = Vec::new();
        for (r, eff) in spec.effects.iter().enumerate() {
            if let ModeStructure::FixedMatrix(a) = &eff.structure {
                if a.nrows() != design.effect(r).dim() {
                    return Err(Error::DimensionMismatch {
                        what: format!("fixed prior mode for effect {r}"),
                        expected: design.effect(r).dim(),
                        got: a.nrows(),
                    });
                }
            }
            if let Some(b) = eff.fixed_strength {
                if !(b >= T::zero() && b < T::one()) {
                    return Err(Error::invalid("fixed strength", "must lie in [0, 1)"));
                }
                continue;
            }
            let (lo, hi) = eff.strength_bounds;
            if !(T::zero() < lo && lo < hi && hi < T::one()) {
                return Err(Error::invalid(
                    "strength bounds",
                    "need 0 < low < high < 1",
                ));
            }
            strength_coords[r] = lower.len();
            lower.push(logit(lo));
            upper.push(logit(hi));
        }
        for (r, eff) in spec.effects.iter().enumerate() {
            if matches!(eff.structure, ModeStructure::ScalarIdentity) {
                let (lo, hi) = eff.scale_bounds;
                if !(T::zero() < lo && lo < hi) {
                    return Err(Error::invalid("scale bounds", "need 0 < low < high"));
                }
                scale_coords.push((lower.len(), r));
                lower.push(lo.ln());
                upper.push(hi.ln());
            }
        }
        let lambda_coord = if spec.optimize_lambda {
            let (lo, hi) = spec.lambda_bounds;
            if !(T::zero() < lo && lo < hi) {
                return Err(Error::invalid(
                    "lambda bounds",
                    "need 0 < low < high for the log-scale search",
                ));
            }
            let c = lower.len();
            lower.push(lo.ln());
            upper.push(hi.ln());
            Some(c)
        } else {
            None
        };
        Ok(Self {
            strength_coords,
            scale_coords,
            lambda_coord,
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn prior_from<U: Real>(
        &self,
        design: &ModelDesign<U>,
        spec: &HyperSearchSpec<T>,
        x: &DVector<T>,
    ) -> PriorSpec<U> {
        let mut effects = Vec::with_capacity(spec.effects.len());
        let mut scale_iter = self.scale_coords.iter().peekable();
        for (r, eff) in spec.effects.iter().enumerate() {
            let strength = match eff.fixed_strength {
                Some(b) => U::of(b.as_f64()),
                None => U::of(sigmoid(x[self.strength_coords[r]]).as_f64()),
            };
            let mode = match &eff.structure {
                ModeStructure::ScalarIdentity => {
                    let (c, er) = *scale_iter.next().expect("scale coordinate");
                    debug_assert_eq!(er, r);
                    let a = x[c].exp();
                    DMatrix::from_diagonal_element(
                        design.effect(r).dim(),
                        design.effect(r).dim(),
                        U::of(a.as_f64()),
                    )
                }
                ModeStructure::FixedMatrix(a) => {
                    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| U::of(a[(i, j)].as_f64()))
                }
            };
            effects.push(EffectPrior { mode, strength });
        }
        let lambda = match self.lambda_coord {
            Some(c) => U::of(x[c].exp().as_f64()),
            None => U::of(spec.lambda_fixed.as_f64()),
        };
        PriorSpec {
            lambda,
            alpha: U::of(spec.alpha.as_f64()),
            effects,
        }
    }

    /// Deterministic multistart points: strength at a start-dependent
    /// fraction of its range, scale at `a = 1` or at the response variance,
    /// `lambda` mid-range.
    fn start_point(&self, k: usize, var_y: T) -> DVector<T> {
        let frac = match k % 3 {
            0 => T::of(0.1),
            1 => T::of(0.9),
            _ => T::of(0.5),
        };
        // Later start rounds shift the fraction to stay distinct.
        let frac = frac + T::of(0.13) * T::of_usize(k / 3);
        let frac = frac - frac.floor();
        let mut x = DVector::zeros(self.dim());
        for &c in &self.strength_coords {
            if c != usize::MAX {
                x[c] = self.lower[c] + (self.upper[c] - self.lower[c]) * frac;
            }
        }
        for &(c, _) in &self.scale_coords {
            let v = if k % 3 == 2 { var_y.max(T::of(1e-6)).ln() } else { T::zero() };
            x[c] = v.max(self.lower[c]).min(self.upper[c]);
        }
        if let Some(c) = self.lambda_coord {
            x[c] = (self.lower[c] + self.upper[c]) / T::of(2.0);
        }
        x
    }
}

/// Maximize the Laplace-approximated log marginal likelihood over the
/// hyperparameters. Returns the selected prior and the MAP fit under it,
/// with `marginal_log_likelihood` set to the attained value.
pub fn optimize_hyperparameters<T: Real>(
    design: &ModelDesign<T>,
    spec: &HyperSearchSpec<T>,
    settings: &EmSettings<T>,
) -> Result<(PriorSpec<T>, FitResult<T>)> {
    if design.p() >= design.n() && !spec.optimize_lambda {
        return Err(Error::invalid(
            "search spec",
            "p >= n requires optimize_lambda = true",
        ));
    }
    if spec.multistart == 0 {
        return Err(Error::invalid("multistart", "must be at least 1"));
    }
    let layout = SearchLayout::new(design, spec)?;
    if layout.dim() == 0 {
        return Err(Error::invalid(
            "search spec",
            "no free hyperparameters to optimize",
        ));
    }

    let mean = design.y().sum() / T::of_usize(design.n());
    let var_y = if design.n() > 1 {
        design
            .y()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |a, b| a + b)
            / T::of_usize(design.n() - 1)
    } else {
        T::one()
    };

    let inner_settings = settings.clone().with_tolerance(spec.inner_tolerance);

    let run_start = |k: usize| -> Result<(T, DVector<T>, FitResult<T>)> {
        // Warm start: each start owns the mode of its previous evaluation.
        let warm: RefCell<Option<ModelParams<T>>> = RefCell::new(None);
        let objective = |x: &DVector<T>| -> Result<T> {
            let prior = layout.prior_from(design, spec, x);
            let mut st = inner_settings.clone();
            if let Some(p) = warm.borrow().as_ref() {
                st = st.with_init(p.clone());
            }
            let (value, fit) = laplace_log_marginal(design, &prior, &st)?;
            *warm.borrow_mut() = Some(fit.params);
            Ok(value)
        };
        let solver = BoundedBfgs::new(layout.lower.clone(), layout.upper.clone())?
            .with_tolerance(spec.outer_tolerance)
            .with_max_iterations(spec.max_outer_iterations);
        let x0 = layout.start_point(k, var_y);
        let outcome = solver.maximize(&x0, objective)?;
        // Re-evaluate at the optimum so the returned fit matches it.
        let prior = layout.prior_from(design, spec, &outcome.x);
        let mut st = inner_settings.clone();
        if let Some(p) = warm.borrow().as_ref() {
            st = st.with_init(p.clone());
        }
        let (value, fit) = laplace_log_marginal(design, &prior, &st)?;
        Ok((value, outcome.x, fit))
    };

    let results: Vec<Result<(T, DVector<T>, FitResult<T>)>> = (0..spec.multistart)
        .into_par_iter()
        .map(run_start)
        .collect();

    let mut best: Option<(T, usize, DVector<T>, FitResult<T>)> = None;
    let mut diagnostics = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok((value, x, fit)) => {
                let better = match &best {
                    None => true,
                    Some((bv, _, _, _)) => value > *bv,
                };
                if better {
                    best = Some((value, k, x, fit));
                }
            }
            Err(e) => diagnostics.push(format!("start {k}: {e}")),
        }
    }
    match best {
        Some((value, _, x, mut fit)) => {
            let prior = layout.prior_from(design, spec, &x);
            fit.marginal_log_likelihood = Some(value);
            Ok((prior, fit))
        }
        None => Err(Error::OptimizationFailed { diagnostics }),
    }
}

/// Which hyperparameter a profile run varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperCoordinate {
    /// Strength `b_r` of effect `r`.
    Strength(usize),
    /// Scalar mode `a_r` of effect `r` (the mode becomes `a I`).
    ModeScale(usize),
    Lambda,
}

/// Evaluate the log marginal likelihood along a grid of one hyperparameter,
/// all others held at `base`. Rows come back in input order. Consecutive
/// evaluations warm-start from the previous mode.
pub fn profile_hyperparameter<T: Real>(
    design: &ModelDesign<T>,
    base: &PriorSpec<T>,
    which: HyperCoordinate,
    grid: &[T],
    settings: &EmSettings<T>,
) -> Result<Vec<(T, T)>> {
    if let HyperCoordinate::Strength(r) | HyperCoordinate::ModeScale(r) = which {
        if r >= base.effects.len() {
            return Err(Error::invalid("profile coordinate", "effect index out of range"));
        }
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut warm: Option<ModelParams<T>> = None;
    for &v in grid {
        let mut prior = base.clone();
        match which {
            HyperCoordinate::Strength(r) => prior.effects[r].strength = v,
            HyperCoordinate::ModeScale(r) => {
                let q = prior.effects[r].mode.nrows();
                prior.effects[r].mode = DMatrix::from_diagonal_element(q, q, v);
            }
            HyperCoordinate::Lambda => prior.lambda = v,
        }
        let mut st = settings.clone();
        if let Some(p) = &warm {
            st = st.with_init(p.clone());
        }
        let (value, fit) = laplace_log_marginal(design, &prior, &st)?;
        warm = Some(fit.params);
        out.push((v, value));
    }
    Ok(out)
}

/// Convenience: a MAP fit under the prior chosen by
/// [`optimize_hyperparameters`], refit at the caller's tolerance.
pub fn fit_empirical_bayes<T: Real>(
    design: &ModelDesign<T>,
    spec: &HyperSearchSpec<T>,
    settings: &EmSettings<T>,
) -> Result<(PriorSpec<T>, FitResult<T>)> {
    let (prior, fit) = optimize_hyperparameters(design, spec, settings)?;
    let ml = fit.marginal_log_likelihood;
    let mut refit = fit_map(design, &prior, &settings.clone().with_init(fit.params))?;
    refit.marginal_log_likelihood = ml;
    Ok((prior, refit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip() {
        for &b in &[1e-3, 0.2, 0.9] {
            let x = logit(b);
            approx::assert_relative_eq!(sigmoid(x), b, max_relative = 1e-12);
        }
    }

    #[test]
    fn profile_has_grid_shape() {
        let n = 10;
        let y = nalgebra::DVector::from_fn(n, |i, _| ((i * 3 % 5) as f64) - 2.0);
        let x = nalgebra::DMatrix::from_element(n, 1, 1.0);
        let u = nalgebra::DMatrix::from_element(n, 1, 1.0);
        let eff = crate::design::RandomEffectSpec::new((0..n).map(|i| i % 3).collect(), 3, u)
            .unwrap();
        let design = crate::design::ModelDesign::new(y, x, vec![eff]).unwrap();
        let base = PriorSpec::new(
            0.0,
            1e-3,
            vec![EffectPrior::new(nalgebra::DMatrix::identity(1, 1), 0.5).unwrap()],
        )
        .unwrap();
        let grid = [0.1, 0.3, 0.5, 0.7, 0.85];
        let rows = profile_hyperparameter(
            &design,
            &base,
            HyperCoordinate::Strength(0),
            &grid,
            &EmSettings::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        for (row, &g) in rows.iter().zip(&grid) {
            assert_eq!(row.0, g);
            assert!(row.1.is_finite());
        }
    }

    #[test]
    fn constant_response_stays_finite() {
        let n = 12;
        let y = nalgebra::DVector::zeros(n);
        let x = nalgebra::DMatrix::from_element(n, 1, 1.0);
        let u = nalgebra::DMatrix::from_element(n, 1, 1.0);
        let eff = crate::design::RandomEffectSpec::new((0..n).map(|i| i % 3).collect(), 3, u)
            .unwrap();
        let design = crate::design::ModelDesign::new(y, x, vec![eff]).unwrap();
        let base = PriorSpec::new(
            0.0,
            1e-3,
            vec![EffectPrior::new(nalgebra::DMatrix::identity(1, 1), 0.5).unwrap()],
        )
        .unwrap();
        let grid = [0.05, 0.3, 0.6, 0.9];
        let rows = profile_hyperparameter(
            &design,
            &base,
            HyperCoordinate::Strength(0),
            &grid,
            &EmSettings::default(),
        )
        .unwrap();
        assert!(rows.iter().all(|r: &(f64, f64)| r.1.is_finite()));
    }

    #[test]
    fn p_at_least_n_requires_lambda_search() {
        let n = 3;
        let y = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = nalgebra::DMatrix::from_fn(n, 4, |i, c| ((i + c * 2) % 3) as f64);
        let design = crate::design::ModelDesign::new(y, x, vec![]).unwrap();
        let spec = HyperSearchSpec::<f64>::scalar_identity(0);
        assert!(optimize_hyperparameters(&design, &spec, &EmSettings::default()).is_err());
    }
}
