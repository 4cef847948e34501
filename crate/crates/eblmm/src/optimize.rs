//! Box-constrained quasi-Newton maximizer with finite-difference gradients.
//!
//! BFGS on the negated objective with gradient projection onto the box and
//! a backtracking line search that only accepts improvements, so the
//! iterate value is monotone. Deterministic: no randomness, fixed
//! tie-breaking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct BoundedBfgs<T: Real> {
    pub lower: DVector<T>,
    pub upper: DVector<T>,
    /// Convergence tolerance on the infinity norm of the projected gradient
    /// and on the step size.
    pub tol: T,
    pub max_iterations: usize,
    /// Central-difference step on the (transformed) coordinates.
    pub fd_step: T,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome<T: Real> {
    pub x: DVector<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

impl<T: Real> BoundedBfgs<T> {
    pub fn new(lower: DVector<T>, upper: DVector<T>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "bound vectors".into(),
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) || !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::invalid(
                    "bounds",
                    format!("need finite lower < upper at coordinate {i}"),
                ));
            }
        }
        Ok(Self {
            lower,
            upper,
            tol: T::of(1e-6),
            max_iterations: 100,
            fd_step: T::of(1e-4),
        })
    }

    pub fn with_tolerance(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    fn clip(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_fn(x.len(), |i, _| x[i].max(self.lower[i]).min(self.upper[i]))
    }

    /// Central-difference gradient with the stencil clipped into the box;
    /// the actual spread is used as the divisor. An objective failure at a
    /// stencil point shrinks the step up to three times.
    fn gradient<F>(&self, f: &mut F, x: &DVector<T>, evals: &mut usize) -> Result<DVector<T>>
    where
        F: FnMut(&DVector<T>) -> Result<T>,
    {
        let d = x.len();
        let mut g = DVector::zeros(d);
        for i in 0..d {
            let mut h = self.fd_step;
            let mut ok = false;
            for _ in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] = (x[i] + h).min(self.upper[i]);
                xm[i] = (x[i] - h).max(self.lower[i]);
                let spread = xp[i] - xm[i];
                if spread <= T::zero() {
                    g[i] = T::zero();
                    ok = true;
                    break;
                }
                *evals += 2;
                match (f(&xp), f(&xm)) {
                    (Ok(fp), Ok(fm)) if fp.is_finite() && fm.is_finite() => {
                        g[i] = (fp - fm) / spread;
                        ok = true;
                        break;
                    }
                    _ => h /= T::of(10.0),
                }
            }
            if !ok {
                return Err(Error::invalid(
                    "finite-difference gradient",
                    format!("objective not evaluable near coordinate {i}"),
                ));
            }
        }
        Ok(g)
    }

    /// Maximize `f` over the box from `x0`.
    pub fn maximize<F>(&self, x0: &DVector<T>, mut f: F) -> Result<BfgsOutcome<T>>
    where
        F: FnMut(&DVector<T>) -> Result<T>,
    {
        let d = x0.len();
        let mut evals = 0usize;
        let mut x = self.clip(x0);
        let mut fx = f(&x)?;
        evals += 1;
        if !fx.is_finite() {
            return Err(Error::invalid("objective", "not finite at the start"));
        }
        let mut g = self.gradient(&mut f, &x, &mut evals)?;
        let mut hinv: DMatrix<T> = DMatrix::identity(d, d);
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.max_iterations {
            // Projected-gradient convergence test.
            let pg = self.clip(&(&x + &g)) - &x;
            if pg.amax() < self.tol {
                converged = true;
                break;
            }

            let mut dir = &hinv * &g;
            if dir.dot(&g) <= T::zero() {
                hinv = DMatrix::identity(d, d);
                dir = g.clone();
            }

            // Backtracking line search on the projected path.
            let c1 = T::of(1e-4);
            let mut step = T::one();
            let mut accepted: Option<(DVector<T>, T)> = None;
            for _ in 0..60 {
                let cand = self.clip(&(&x + &dir * step));
                let delta = &cand - &x;
                if delta.amax() == T::zero() {
                    break;
                }
                evals += 1;
                if let Ok(fc) = f(&cand) {
                    if fc.is_finite() && fc >= fx + c1 * g.dot(&delta) {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                step /= T::of(2.0);
            }
            // Fall back to steepest ascent before giving up.
            if accepted.is_none() && (&dir - &g).amax() > T::zero() {
                let mut step = T::one();
                for _ in 0..60 {
                    let cand = self.clip(&(&x + &g * step));
                    let delta = &cand - &x;
                    if delta.amax() == T::zero() {
                        break;
                    }
                    evals += 1;
                    if let Ok(fc) = f(&cand) {
                        if fc.is_finite() && fc >= fx + c1 * g.dot(&delta) {
                            hinv = DMatrix::identity(d, d);
                            accepted = Some((cand, fc));
                            break;
                        }
                    }
                    step /= T::of(2.0);
                }
            }

            let Some((x_new, f_new)) = accepted else {
                // No improving point along either direction: treat the
                // iterate as a local maximum on the box.
                converged = true;
                break;
            };

            let g_new = self.gradient(&mut f, &x_new, &mut evals)?;
            let s = &x_new - &x;
            let yv = &g - &g_new; // gradient change of the negated objective
            let sy = s.dot(&yv);
            if sy > T::of(1e-10) * s.norm() * yv.norm() {
                // Inverse BFGS update (minimization convention on -f).
                let rho = T::one() / sy;
                let hy = &hinv * &yv;
                let yhy = yv.dot(&hy);
                for i in 0..d {
                    for j in 0..d {
                        hinv[(i, j)] += (sy + yhy) * s[i] * s[j] * rho * rho
                            - (hy[i] * s[j] + s[i] * hy[j]) * rho;
                    }
                }
            }

            let step_size = s.amax();
            x = x_new;
            fx = f_new;
            g = g_new;
            iterations += 1;
            if step_size < self.tol {
                converged = true;
                break;
            }
        }

        Ok(BfgsOutcome {
            x,
            value: fx,
            iterations,
            converged,
            evaluations: evals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solver(d: usize, lo: f64, hi: f64) -> BoundedBfgs<f64> {
        BoundedBfgs::new(DVector::from_element(d, lo), DVector::from_element(d, hi))
            .unwrap()
            .with_tolerance(1e-9)
            .with_max_iterations(500)
    }

    #[test]
    fn quadratic_interior_maximum() {
        let s = solver(3, -10.0, 10.0);
        let target = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let out = s
            .maximize(&DVector::zeros(3), |x| Ok(-(x - &target).norm_squared()))
            .unwrap();
        assert!(out.converged);
        for i in 0..3 {
            assert_relative_eq!(out.x[i], target[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn maximum_on_the_boundary_is_found() {
        let s = solver(2, -1.0, 1.0);
        let out = s
            .maximize(&DVector::zeros(2), |x| Ok(x[0] + 0.5 * x[1]))
            .unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn curved_valley() {
        let s = solver(2, -5.0, 5.0).with_max_iterations(5000);
        let out = s
            .maximize(&DVector::from_vec(vec![-1.2, 1.0]), |x| {
                let a = 1.0 - x[0];
                let b = x[1] - x[0] * x[0];
                Ok(-(a * a + 100.0 * b * b))
            })
            .unwrap();
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn objective_failures_are_treated_as_rejections() {
        // The objective errors away from the optimum; the solver must stay
        // inside the evaluable region and still converge.
        let s = solver(1, -3.0, 3.0);
        let out = s
            .maximize(&DVector::from_vec(vec![0.1]), |x| {
                if x[0].abs() > 2.0 {
                    Err(Error::invalid("test", "outside domain"))
                } else {
                    Ok(-(x[0] - 1.5) * (x[0] - 1.5))
                }
            })
            .unwrap();
        assert_relative_eq!(out.x[0], 1.5, epsilon = 1e-6);
    }
}
