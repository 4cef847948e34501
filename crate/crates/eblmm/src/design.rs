//! Model design: response, fixed-effect matrix and random-effect structure.
//!
//! A random effect `r` is described by a grouping vector (observation i
//! belongs to level `group_of[i]`) and a covariate matrix `U_r`. The design
//! matrix `Z_r` — the row-wise (face-splitting) product of the level
//! indicator matrix with `U_r` — is derived on demand and never stored.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One random effect: grouping factor plus covariates.
#[derive(Debug, Clone)]
pub struct RandomEffectSpec<T: Real> {
    group_of: Vec<usize>,
    u: DMatrix<T>,
    levels: usize,
    rows_by_level: Vec<Vec<usize>>,
}

impl<T: Real> RandomEffectSpec<T> {
    /// Build and validate a random effect. `group_of[i]` is the 0-based
    /// level of observation `i`; every level in `0..levels` must occur.
    pub fn new(group_of: Vec<usize>, levels: usize, u: DMatrix<T>) -> Result<Self> {
        if u.ncols() == 0 {
            return Err(Error::invalid("U", "needs at least one column"));
        }
        if u.nrows() != group_of.len() {
            return Err(Error::DimensionMismatch {
                what: "U rows vs group assignments".into(),
                expected: group_of.len(),
                got: u.nrows(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("U"));
        }
        let mut rows_by_level = vec![Vec::new(); levels];
        for (i, &k) in group_of.iter().enumerate() {
            if k >= levels {
                return Err(Error::invalid(
                    "group assignment",
                    format!("observation {i} has level {k}, but only {levels} levels declared"),
                ));
            }
            rows_by_level[k].push(i);
        }
        Ok(Self {
            group_of,
            u,
            levels,
            rows_by_level,
        })
    }

    /// Number of levels `m_r`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Random-effect dimension `q_r`.
    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    /// Level of observation `i`.
    pub fn level_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    /// 0-based level assignments, one per observation.
    pub fn assignments(&self) -> &[usize] {
        &self.group_of
    }

    /// Covariate matrix `U_r` (n x q_r).
    pub fn covariates(&self) -> &DMatrix<T> {
        &self.u
    }

    /// Observation rows belonging to level `j`.
    pub fn rows_of_level(&self, j: usize) -> &[usize] {
        &self.rows_by_level[j]
    }

    /// Covariate rows of level `j` gathered into a dense block.
    pub fn level_block(&self, j: usize) -> DMatrix<T> {
        let rows = &self.rows_by_level[j];
        let q = self.dim();
        let mut block = DMatrix::zeros(rows.len(), q);
        for (bi, &i) in rows.iter().enumerate() {
            for c in 0..q {
                block[(bi, c)] = self.u[(i, c)];
            }
        }
        block
    }
}

/// Complete design of a linear mixed model.
#[derive(Debug, Clone)]
pub struct ModelDesign<T: Real> {
    y: DVector<T>,
    x: DMatrix<T>,
    effects: Vec<RandomEffectSpec<T>>,
}

impl<T: Real> ModelDesign<T> {
    /// Validate and assemble a design. This is the only constructor, so a
    /// `ModelDesign` value always satisfies the structural invariants.
    pub fn new(y: DVector<T>, x: DMatrix<T>, effects: Vec<RandomEffectSpec<T>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("y", "needs at least one observation"));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("X", "needs at least one column"));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "X rows vs y length".into(),
                expected: n,
                got: x.nrows(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("y"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("X"));
        }
        for (r, eff) in effects.iter().enumerate() {
            if eff.assignments().len() != n {
                return Err(Error::DimensionMismatch {
                    what: format!("group assignments of random effect {r}"),
                    expected: n,
                    got: eff.assignments().len(),
                });
            }
            for (j, rows) in eff.rows_by_level.iter().enumerate() {
                if rows.is_empty() {
                    return Err(Error::EmptyLevel {
                        effect: r,
                        level: j,
                    });
                }
            }
        }
        Ok(Self { y, x, effects })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of fixed-effect columns.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of random effects `R`.
    pub fn n_effects(&self) -> usize {
        self.effects.len()
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn effects(&self) -> &[RandomEffectSpec<T>] {
        &self.effects
    }

    pub fn effect(&self, r: usize) -> &RandomEffectSpec<T> {
        &self.effects[r]
    }

    /// Materialize `Z_r` (n x m_r q_r) on request; row i carries the
    /// covariate row of observation i in the column block of its level.
    pub fn dense_z(&self, r: usize) -> DMatrix<T> {
        let eff = &self.effects[r];
        let q = eff.dim();
        let mut z = DMatrix::zeros(self.n(), eff.levels() * q);
        for i in 0..self.n() {
            let j = eff.level_of(i);
            for c in 0..q {
                z[(i, j * q + c)] = eff.covariates()[(i, c)];
            }
        }
        z
    }

    /// Restrict the design to a subset of observation rows. Levels that
    /// become empty are dropped and the remaining levels renumbered; the
    /// per-effect return value maps old level -> new level.
    pub fn subset(&self, rows: &[usize]) -> Result<(ModelDesign<T>, Vec<Vec<Option<usize>>>)> {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, c| self.x[(rows[i], c)]);
        let mut effects = Vec::with_capacity(self.effects.len());
        let mut maps = Vec::with_capacity(self.effects.len());
        for eff in &self.effects {
            let mut map: Vec<Option<usize>> = vec![None; eff.levels()];
            let mut next = 0usize;
            let mut groups = Vec::with_capacity(rows.len());
            for &i in rows {
                let old = eff.level_of(i);
                let new = *map[old].get_or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                });
                groups.push(new);
            }
            let u = DMatrix::from_fn(rows.len(), eff.dim(), |i, c| eff.covariates()[(rows[i], c)]);
            effects.push(RandomEffectSpec::new(groups, next, u)?);
            maps.push(map);
        }
        Ok((ModelDesign::new(y, x, effects)?, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn smallest_wellformed_design() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = DMatrix::from_fn(4, 2, |i, c| if c == 0 { 1.0 } else { i as f64 });
        let eff = RandomEffectSpec::new(vec![0, 0, 1, 1], 2, ones(4)).unwrap();
        let d = ModelDesign::new(y, x, vec![eff]).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.effect(0).levels(), 2);
        assert_eq!(d.effect(0).dim(), 1);
    }

    #[test]
    fn empty_level_is_named() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = ones(4);
        let eff = RandomEffectSpec::new(vec![0, 0, 2, 2], 3, ones(4)).unwrap();
        let err = ModelDesign::new(y, x, vec![eff]).unwrap_err();
        match err {
            Error::EmptyLevel { effect, level } => {
                assert_eq!(effect, 0);
                assert_eq!(level, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_matrix() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = ones(3);
        let err = ModelDesign::new(y, x, vec![]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("X rows"), "message was {msg}");
    }

    #[test]
    fn non_finite_rejected() {
        let y = DVector::from_vec(vec![1.0, f64::NAN]);
        let err = ModelDesign::new(y, ones(2), vec![]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn dense_z_scatters_covariates_by_level() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 1.0, 20.0, 1.0, 30.0]);
        let eff = RandomEffectSpec::new(vec![1, 0, 1], 2, u).unwrap();
        let d = ModelDesign::new(y, ones(3), vec![eff]).unwrap();
        let z = d.dense_z(0);
        assert_eq!(z.shape(), (3, 4));
        assert_eq!(z[(0, 2)], 1.0);
        assert_eq!(z[(0, 3)], 10.0);
        assert_eq!(z[(1, 0)], 1.0);
        assert_eq!(z[(1, 1)], 20.0);
        assert_eq!(z[(0, 0)], 0.0);
    }

    #[test]
    fn subset_drops_and_renumbers_levels() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let eff = RandomEffectSpec::new(vec![0, 1, 1, 2], 3, ones(4)).unwrap();
        let d = ModelDesign::new(y, ones(4), vec![eff]).unwrap();
        let (sub, maps) = d.subset(&[1, 2, 3]).unwrap();
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.effect(0).levels(), 2);
        assert_eq!(maps[0], vec![None, Some(0), Some(1)]);
    }
}
