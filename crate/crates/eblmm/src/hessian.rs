//! Closed-form Hessians of the log-likelihood and the log-prior in the
//! coordinates of [`ParamCoordinates`].
//!
//! The covariance derivatives are `dV/dsigma2 = I` and
//! `dV/dSigma_{r,ij} = Z_r (I ⊗ E_ij) Z_r^T`, where `E_ij` is the symmetric
//! elementary matrix with ones at `(i,j)` and `(j,i)`. All trace and
//! quadratic terms reduce to small per-level blocks of the Gram matrices
//! `Z_r^T V^{-1} Z_{r'}`, so no `n x n` product is formed per coordinate
//! pair.

use nalgebra::{DMatrix, DVector};

use crate::coords::ParamCoordinates;
use crate::design::ModelDesign;
use crate::em::VState;
use crate::error::{Error, Result};
use crate::likelihood::check_compatible;
use crate::params::{ModelParams, PriorSpec};
use crate::scalar::Real;

/// Index pairs of the symmetric elementary matrix `E_ij`.
fn e_entries(i: usize, j: usize) -> Vec<(usize, usize)> {
    if i == j {
        vec![(i, i)]
    } else {
        vec![(i, j), (j, i)]
    }
}

/// `(I ⊗ E_a) v` for a block vector with `levels` blocks of size `q`.
fn scatter<T: Real>(
    v: &DVector<T>,
    levels: usize,
    q: usize,
    entries: &[(usize, usize)],
) -> DVector<T> {
    let mut out = DVector::zeros(v.len());
    for l in 0..levels {
        let off = l * q;
        for &(s, t) in entries {
            out[off + s] += v[off + t];
        }
    }
    out
}

/// Hessian of the Gaussian log-likelihood with respect to
/// `(beta, {Sigma_r}, sigma2)`.
pub fn hessian_log_likelihood<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
) -> Result<DMatrix<T>> {
    check_compatible(design, params)?;
    let state = VState::new(design, params)?;
    Ok(hessian_log_likelihood_with(design, &state))
}

pub(crate) fn hessian_log_likelihood_with<T: Real>(
    design: &ModelDesign<T>,
    state: &VState<T>,
) -> DMatrix<T> {
    let layout = ParamCoordinates::for_design(design);
    let d = layout.dim();
    let p = design.p();
    let nr = design.n_effects();
    let half = T::of(0.5);
    let mut h = DMatrix::zeros(d, d);

    let t = &state.w; // V^{-1} (y - X beta)
    let vinv_x = &state.v_inv * design.x(); // V^{-1} X

    // beta block: -X^T V^{-1} X.
    let xtvx = design.x().transpose() * &vinv_x;
    for i in 0..p {
        for j in 0..p {
            h[(i, j)] = -xtvx[(i, j)];
        }
    }

    // beta / sigma2: -X^T V^{-2} (y - X beta).
    let beta_sigma2 = vinv_x.transpose() * t;
    let s2 = layout.sigma2_index();
    for i in 0..p {
        h[(i, s2)] = -beta_sigma2[i];
        h[(s2, i)] = -beta_sigma2[i];
    }

    // sigma2 / sigma2: 1/2 tr(V^{-2}) - r^T V^{-3} r.
    let tr_vinv2 = state.v_inv.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let vinv_t = &state.v_inv * t;
    h[(s2, s2)] = half * tr_vinv2 - t.dot(&vinv_t);

    // Per-effect precomputations.
    let zs: Vec<DMatrix<T>> = (0..nr).map(|r| design.dense_z(r)).collect();
    let fs: Vec<DMatrix<T>> = zs.iter().map(|z| &state.v_inv * z).collect(); // V^{-1} Z_r
    let vr: Vec<DVector<T>> = zs.iter().map(|z| z.transpose() * t).collect(); // Z_r^T V^{-1} r
    let ff: Vec<DVector<T>> = fs.iter().map(|f| f.transpose() * t).collect(); // Z_r^T V^{-2} r
    let bx: Vec<DMatrix<T>> = fs.iter().map(|f| design.x().transpose() * f).collect();

    // Per-coordinate scattered vectors (I ⊗ E_a) Z_r^T V^{-1} r.
    let mut scat: Vec<Vec<DVector<T>>> = Vec::with_capacity(nr);
    for (r, eff) in design.effects().iter().enumerate() {
        let q = eff.dim();
        let mut per_coord = Vec::with_capacity(q * (q + 1) / 2);
        for i in 0..q {
            for j in 0..=i {
                per_coord.push(scatter(&vr[r], eff.levels(), q, &e_entries(i, j)));
            }
        }
        scat.push(per_coord);
    }

    // beta / Sigma and sigma2 / Sigma blocks.
    for (r, eff) in design.effects().iter().enumerate() {
        let q = eff.dim();
        let off = layout.sigma_offset(r);
        let hr = fs[r].transpose() * &fs[r]; // Z_r^T V^{-2} Z_r
        let mut a_idx = 0;
        for i in 0..q {
            for j in 0..=i {
                let k = off + a_idx;
                // beta rows: -X^T V^{-1} Z_r (I ⊗ E_a) Z_r^T V^{-1} r.
                let col = &bx[r] * &scat[r][a_idx];
                for b in 0..p {
                    h[(b, k)] = -col[b];
                    h[(k, b)] = -col[b];
                }
                // sigma2 entry: 1/2 tr(V^{-2} D_a) - r^T V^{-1} D_a V^{-2} r.
                let entries = e_entries(i, j);
                let mut tr = T::zero();
                for l in 0..eff.levels() {
                    let o = l * q;
                    for &(s, tt) in &entries {
                        tr += hr[(o + s, o + tt)];
                    }
                }
                let quad = scat[r][a_idx].dot(&ff[r]);
                h[(k, s2)] = half * tr - quad;
                h[(s2, k)] = h[(k, s2)];
                a_idx += 1;
            }
        }
    }

    // Sigma / Sigma blocks.
    for r1 in 0..nr {
        let q1 = design.effect(r1).dim();
        let m1 = design.effect(r1).levels();
        let off1 = layout.sigma_offset(r1);
        for r2 in r1..nr {
            let q2 = design.effect(r2).dim();
            let m2 = design.effect(r2).levels();
            let off2 = layout.sigma_offset(r2);
            let g = zs[r1].transpose() * &fs[r2]; // Z_r1^T V^{-1} Z_r2

            let mut a_idx = 0;
            for i in 0..q1 {
                for j in 0..=i {
                    let ea = e_entries(i, j);
                    let ka = off1 + a_idx;
                    let mut b_idx = 0;
                    for i2 in 0..q2 {
                        for j2 in 0..=i2 {
                            let kb = off2 + b_idx;
                            if r1 == r2 && kb < ka {
                                b_idx += 1;
                                continue;
                            }
                            let eb = e_entries(i2, j2);
                            // tr(E_a P E_b P^T) summed over level blocks P.
                            let mut tr = T::zero();
                            for l1 in 0..m1 {
                                for l2 in 0..m2 {
                                    let (o1, o2) = (l1 * q1, l2 * q2);
                                    for &(s, t1) in &ea {
                                        for &(u, v) in &eb {
                                            tr += g[(o1 + t1, o2 + u)] * g[(o1 + s, o2 + v)];
                                        }
                                    }
                                }
                            }
                            let quad = scat[r1][a_idx].dot(&(&g * &scat[r2][b_idx]));
                            let val = half * tr - quad;
                            h[(ka, kb)] = val;
                            h[(kb, ka)] = val;
                            b_idx += 1;
                        }
                    }
                    a_idx += 1;
                }
            }
        }
    }

    // Mirror the lower triangle so the result is exactly symmetric; the
    // blocks are symmetric analytically but not bitwise.
    for i in 0..d {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    h
}

/// Hessian of the log-prior. Only the fixed-effect/error-variance corner
/// and the within-effect covariance blocks are nonzero; improper components
/// contribute nothing. The design supplies the level counts behind the
/// inverse-Wishart degrees of freedom.
pub fn hessian_log_prior<T: Real>(
    design: &ModelDesign<T>,
    params: &ModelParams<T>,
    prior: &PriorSpec<T>,
) -> Result<DMatrix<T>> {
    check_compatible(design, params)?;
    if prior.effects.len() != params.sigmas.len() {
        return Err(Error::DimensionMismatch {
            what: "prior effects vs covariances".into(),
            expected: params.sigmas.len(),
            got: prior.effects.len(),
        });
    }
    let layout = ParamCoordinates::for_design(design);
    let d = layout.dim();
    let p = design.p();
    let s2 = layout.sigma2_index();
    let sigma2 = params.sigma2;
    let mut h = DMatrix::zeros(d, d);

    if prior.lambda > T::zero() {
        let lam = prior.lambda;
        for i in 0..p {
            h[(i, i)] = -lam / sigma2;
        }
        let s4 = sigma2 * sigma2;
        for i in 0..p {
            let v = lam / s4 * params.beta[i];
            h[(i, s2)] = v;
            h[(s2, i)] = v;
        }
        h[(s2, s2)] +=
            T::of_usize(p) / (T::of(2.0) * s4) - lam * params.beta.norm_squared() / (s4 * sigma2);
    }

    if prior.alpha > T::zero() {
        let a = prior.alpha;
        let s4 = sigma2 * sigma2;
        h[(s2, s2)] += (a + T::one()) / s4 - T::of(2.0) * a / (s4 * sigma2);
    }

    for (r, eff_prior) in prior.effects.iter().enumerate() {
        let b = eff_prior.strength;
        if b == T::zero() || b == T::one() {
            continue;
        }
        let m = design.effect(r).levels();
        let q = design.effect(r).dim();
        let eta = eff_prior.eta(m);
        let phi = eff_prior.phi(m);
        let c = (eta + T::of_usize(q) + T::one()) / T::of(2.0);
        let sigma_inv = nalgebra::Cholesky::new(params.sigmas[r].clone())
            .ok_or(Error::NotPositiveDefinite {
                what: format!("Sigma[{r}]"),
                pivot: f64::NAN,
            })?
            .inverse();
        let off = layout.sigma_offset(r);
        let e_mat = |i: usize, j: usize| -> DMatrix<T> {
            let mut e = DMatrix::zeros(q, q);
            e[(i, j)] = T::one();
            e[(j, i)] = T::one();
            e
        };
        let mut a_idx = 0;
        for i in 0..q {
            for j in 0..=i {
                let sa = &sigma_inv * e_mat(i, j) * &sigma_inv;
                let mut b_idx = 0;
                for i2 in 0..q {
                    for j2 in 0..=i2 {
                        if b_idx < a_idx {
                            b_idx += 1;
                            continue;
                        }
                        let eb = e_mat(i2, j2);
                        let val =
                            c * (&sa * &eb).trace() - (&sa * &eb * &sigma_inv * &phi).trace();
                        h[(off + a_idx, off + b_idx)] = val;
                        h[(off + b_idx, off + a_idx)] = val;
                        b_idx += 1;
                    }
                }
                a_idx += 1;
            }
        }
    }

    for i in 0..d {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    Ok(h)
}
