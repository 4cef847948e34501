//! Cross-validation harness: hold out one observation per individual,
//! fit each model variant on the remainder, and score the conditional
//! predictions on the held-out outcomes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::design::ModelDesign;
use crate::eb::{optimize_hyperparameters, HyperSearchSpec};
use crate::em::{fit_map, fit_ml, EmSettings};
use crate::error::{Error, Result};
use crate::params::PriorSpec;
use crate::predict::{mean_squared_error, predict_conditional, NewEffect, PredictionProblem};
use crate::scalar::Real;

/// How a variant's parameters are estimated.
#[derive(Debug, Clone)]
pub enum PriorMode<T: Real> {
    /// Flat prior: maximum likelihood.
    Flat,
    /// Fixed hyperparameters.
    Fixed(PriorSpec<T>),
    /// Hyperparameters selected per split by marginal-likelihood search.
    EmpiricalBayes(HyperSearchSpec<T>),
}

/// One model variant: its own design over the same observations.
#[derive(Debug, Clone)]
pub struct CvVariant<T: Real> {
    pub name: String,
    pub design: ModelDesign<T>,
    pub prior: PriorMode<T>,
}

/// Cross-validation settings.
#[derive(Debug, Clone)]
pub struct CvConfig<T: Real> {
    /// Level of the splitting factor for each observation (0-based); one
    /// test observation is drawn per level with at least two observations.
    pub split_groups: Vec<usize>,
    pub n_levels: usize,
    pub splits: usize,
    pub seed: u64,
    pub em: EmSettings<T>,
}

/// One scored row: squared prediction error divided by the test size.
#[derive(Debug, Clone)]
pub struct CvRow {
    pub split: usize,
    pub variant: String,
    pub rmse: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
}

impl CvReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["split", "variant", "rmse", "n_test"])?;
        for row in &self.rows {
            wtr.write_record([
                row.split.to_string(),
                row.variant.clone(),
                format!("{}", row.rmse),
                row.n_test.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn rmse_of(&self, variant: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.rmse)
            .collect()
    }
}

/// Pick one test observation per level with at least two observations;
/// singleton levels stay in training.
fn split_test_rows(
    split_groups: &[usize],
    n_levels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut rows_by_level = vec![Vec::new(); n_levels];
    for (i, &g) in split_groups.iter().enumerate() {
        rows_by_level[g].push(i);
    }
    let mut test = Vec::new();
    for rows in &rows_by_level {
        if rows.len() >= 2 {
            test.push(rows[rng.gen_range(0..rows.len())]);
        }
    }
    test.sort_unstable();
    test
}

/// Run the cross-validation over all variants. Splits execute
/// concurrently; rows come back ordered by (split, variant index).
pub fn cross_validate<T: Real>(
    variants: &[CvVariant<T>],
    config: &CvConfig<T>,
) -> Result<CvReport> {
    if variants.is_empty() {
        return Err(Error::invalid("variants", "need at least one"));
    }
    let n = variants[0].design.n();
    for v in variants {
        if v.design.n() != n {
            return Err(Error::DimensionMismatch {
                what: format!("observations of variant {}", v.name),
                expected: n,
                got: v.design.n(),
            });
        }
    }
    if config.split_groups.len() != n {
        return Err(Error::DimensionMismatch {
            what: "split group assignments".into(),
            expected: n,
            got: config.split_groups.len(),
        });
    }
    if config.splits == 0 {
        return Err(Error::invalid("splits", "must be at least 1"));
    }

    let run_split = |s: usize| -> Result<Vec<CvRow>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s as u64 + 1);
        let test_rows = split_test_rows(&config.split_groups, config.n_levels, &mut rng);
        if test_rows.is_empty() {
            return Err(Error::invalid(
                "cross-validation split",
                "no level has two or more observations",
            ));
        }
        let test_set: std::collections::HashSet<usize> = test_rows.iter().copied().collect();
        let train_rows: Vec<usize> = (0..n).filter(|i| !test_set.contains(i)).collect();

        let mut rows = Vec::with_capacity(variants.len());
        for variant in variants {
            let (train_design, level_maps) = variant.design.subset(&train_rows)?;
            let params = match &variant.prior {
                PriorMode::Flat => fit_ml(&train_design, &config.em)?.params,
                PriorMode::Fixed(prior) => fit_map(&train_design, prior, &config.em)?.params,
                PriorMode::EmpiricalBayes(spec) => {
                    optimize_hyperparameters(&train_design, spec, &config.em)?
                        .1
                        .params
                }
            };

            // Test rows become new observations; levels that vanished from
            // the training subset turn into fresh levels.
            let x_new = DMatrix::from_fn(test_rows.len(), variant.design.p(), |i, c| {
                variant.design.x()[(test_rows[i], c)]
            });
            let mut new_effects = Vec::with_capacity(variant.design.n_effects());
            for (r, eff) in variant.design.effects().iter().enumerate() {
                let trained_levels = train_design.effect(r).levels();
                let mut fresh_next = trained_levels;
                let groups: Vec<usize> = test_rows
                    .iter()
                    .map(|&i| match level_maps[r][eff.level_of(i)] {
                        Some(mapped) => mapped,
                        None => {
                            let g = fresh_next;
                            fresh_next += 1;
                            g
                        }
                    })
                    .collect();
                let u = DMatrix::from_fn(test_rows.len(), eff.dim(), |i, c| {
                    eff.covariates()[(test_rows[i], c)]
                });
                new_effects.push(NewEffect { groups, u });
            }
            let problem = PredictionProblem::new(train_design, x_new, new_effects)?;
            let pred = predict_conditional(&problem, &params)?;
            let y_test = DVector::from_iterator(
                test_rows.len(),
                test_rows.iter().map(|&i| variant.design.y()[i]),
            );
            let rmse = mean_squared_error(&pred.mean, &y_test)?.as_f64();
            rows.push(CvRow {
                split: s,
                variant: variant.name.clone(),
                rmse,
                n_test: test_rows.len(),
            });
        }
        Ok(rows)
    };

    let results: Vec<Result<Vec<CvRow>>> =
        (0..config.splits).into_par_iter().map(run_split).collect();
    let mut rows = Vec::new();
    for res in results {
        rows.append(&mut res?);
    }
    Ok(CvReport { rows })
}
