//! Flattening of the model parameters into a coordinate vector.
//!
//! Order: `beta` (p entries), then for each random effect the
//! lower-triangular entries of `Sigma_r` row by row, then `sigma2`. The
//! Hessians and the Laplace approximation are expressed in these
//! coordinates.

use nalgebra::{DMatrix, DVector};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Real;

/// Coordinate layout for a model with `p` fixed effects and random-effect
/// dimensions `qs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCoordinates {
    p: usize,
    qs: Vec<usize>,
}

/// One coordinate: which parameter it addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Beta(usize),
    /// Lower-triangular entry `(i, j)` with `i >= j` of `Sigma_r`.
    Sigma {
        effect: usize,
        i: usize,
        j: usize,
    },
    Sigma2,
}

impl ParamCoordinates {
    pub fn new(p: usize, qs: Vec<usize>) -> Self {
        Self { p, qs }
    }

    pub fn for_design<T: Real>(design: &ModelDesign<T>) -> Self {
        Self {
            p: design.p(),
            qs: design.effects().iter().map(|e| e.dim()).collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn qs(&self) -> &[usize] {
        &self.qs
    }

    /// Total coordinate count `d = p + sum_r q_r (q_r + 1) / 2 + 1`.
    pub fn dim(&self) -> usize {
        self.p + self.qs.iter().map(|q| q * (q + 1) / 2).sum::<usize>() + 1
    }

    /// First coordinate of the `Sigma_r` block.
    pub fn sigma_offset(&self, r: usize) -> usize {
        self.p
            + self.qs[..r]
                .iter()
                .map(|q| q * (q + 1) / 2)
                .sum::<usize>()
    }

    pub fn sigma2_index(&self) -> usize {
        self.dim() - 1
    }

    /// Meaning of coordinate `k`.
    pub fn coord(&self, k: usize) -> Coord {
        if k < self.p {
            return Coord::Beta(k);
        }
        let mut off = self.p;
        for (r, &q) in self.qs.iter().enumerate() {
            let len = q * (q + 1) / 2;
            if k < off + len {
                let (i, j) = lower_tri_entry(k - off);
                return Coord::Sigma { effect: r, i, j };
            }
            off += len;
        }
        debug_assert_eq!(k, self.dim() - 1);
        Coord::Sigma2
    }

    pub fn flatten<T: Real>(&self, params: &ModelParams<T>) -> DVector<T> {
        let mut v = DVector::zeros(self.dim());
        let mut k = 0;
        for i in 0..self.p {
            v[k] = params.beta[i];
            k += 1;
        }
        for (r, &q) in self.qs.iter().enumerate() {
            for i in 0..q {
                for j in 0..=i {
                    v[k] = params.sigmas[r][(i, j)];
                    k += 1;
                }
            }
        }
        v[k] = params.sigma2;
        v
    }

    pub fn unflatten<T: Real>(&self, v: &DVector<T>) -> Result<ModelParams<T>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "coordinate vector".into(),
                expected: self.dim(),
                got: v.len(),
            });
        }
        let beta = DVector::from_iterator(self.p, (0..self.p).map(|i| v[i]));
        let mut k = self.p;
        let mut sigmas = Vec::with_capacity(self.qs.len());
        for &q in &self.qs {
            let mut s = DMatrix::zeros(q, q);
            for i in 0..q {
                for j in 0..=i {
                    s[(i, j)] = v[k];
                    s[(j, i)] = v[k];
                    k += 1;
                }
            }
            sigmas.push(s);
        }
        Ok(ModelParams {
            beta,
            sigmas,
            sigma2: v[k],
        })
    }
}

/// Map a linear lower-triangle index (row-major) back to `(i, j)`, `i >= j`.
pub(crate) fn lower_tri_entry(mut idx: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        if idx <= i {
            return (i, idx);
        }
        idx -= i + 1;
        i += 1;
    }
}

/// Subset of coordinates over which a restricted Laplace approximation is
/// evaluated; the complement stays fixed at the supplied values.
#[derive(Debug, Clone)]
pub struct CoordinateMask {
    include: Vec<bool>,
}

impl CoordinateMask {
    pub fn all(layout: &ParamCoordinates) -> Self {
        Self {
            include: vec![true; layout.dim()],
        }
    }

    /// Only the fixed-effect coordinates.
    pub fn beta_only(layout: &ParamCoordinates) -> Self {
        let mut include = vec![false; layout.dim()];
        for k in 0..layout.p() {
            include[k] = true;
        }
        Self { include }
    }

    /// Only the error-variance coordinate.
    pub fn sigma2_only(layout: &ParamCoordinates) -> Self {
        let mut include = vec![false; layout.dim()];
        include[layout.sigma2_index()] = true;
        Self { include }
    }

    pub fn from_included(include: Vec<bool>, layout: &ParamCoordinates) -> Result<Self> {
        if include.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                what: "coordinate mask".into(),
                expected: layout.dim(),
                got: include.len(),
            });
        }
        Ok(Self { include })
    }

    pub fn included(&self) -> &[bool] {
        &self.include
    }

    pub fn count(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.include
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect()
    }

    /// The EM mode search freezes whole parameter groups, so the mask must
    /// include each group either fully or not at all.
    pub(crate) fn to_group_mask(&self, layout: &ParamCoordinates) -> Result<crate::em::GroupMask> {
        let group_state = |range: std::ops::Range<usize>| -> Result<bool> {
            let mut iter = range.clone().map(|k| self.include[k]);
            let first = iter.next().expect("non-empty group");
            if iter.any(|b| b != first) {
                return Err(Error::Unsupported {
                    message: "coordinate mask must align with parameter groups \
                              (beta, each Sigma_r, sigma2) for the mode search"
                        .into(),
                });
            }
            Ok(first)
        };
        let beta = if layout.p() > 0 {
            group_state(0..layout.p())?
        } else {
            false
        };
        let mut sigmas = Vec::with_capacity(layout.qs().len());
        for r in 0..layout.qs().len() {
            let off = layout.sigma_offset(r);
            let len = layout.qs()[r] * (layout.qs()[r] + 1) / 2;
            sigmas.push(group_state(off..off + len)?);
        }
        let sigma2 = self.include[layout.sigma2_index()];
        Ok(crate::em::GroupMask {
            beta,
            sigmas,
            sigma2,
        })
    }
}

/// Extract the masked principal submatrix of a full-coordinate matrix.
pub(crate) fn restrict_matrix<T: Real>(m: &DMatrix<T>, mask: &CoordinateMask) -> DMatrix<T> {
    let idx = mask.indices();
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_tri_index_round_trip() {
        let expected = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
        for (k, &(i, j)) in expected.iter().enumerate() {
            assert_eq!(lower_tri_entry(k), (i, j));
        }
    }

    #[test]
    fn flatten_round_trip_is_exact() {
        let layout = ParamCoordinates::new(2, vec![2, 1]);
        assert_eq!(layout.dim(), 2 + 3 + 1 + 1);
        let params = ModelParams::<f64> {
            beta: DVector::from_vec(vec![1.0, -2.0]),
            sigmas: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
                DMatrix::from_element(1, 1, 0.5),
            ],
            sigma2: 0.9,
        };
        let v = layout.flatten(&params);
        let back = layout.unflatten(&v).unwrap();
        assert_eq!(back, params);
        assert_eq!(v[2], 1.0); // Sigma_1[0,0]
        assert_eq!(v[3], 0.3); // Sigma_1[1,0]
        assert_eq!(v[4], 2.0); // Sigma_1[1,1]
        assert_eq!(v[5], 0.5); // Sigma_2[0,0]
        assert_eq!(v[6], 0.9); // sigma2
    }

    #[test]
    fn group_mask_requires_alignment() {
        let layout = ParamCoordinates::new(2, vec![2]);
        let mut include = vec![false; layout.dim()];
        include[2] = true; // half of Sigma_1
        let mask = CoordinateMask::from_included(include, &layout).unwrap();
        assert!(mask.to_group_mask(&layout).is_err());

        let beta = CoordinateMask::beta_only(&layout);
        let gm = beta.to_group_mask(&layout).unwrap();
        assert!(gm.beta);
        assert!(!gm.sigmas[0]);
        assert!(!gm.sigma2);
    }
}
