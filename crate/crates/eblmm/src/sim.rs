//! Seeded data generators and study runners.
//!
//! The generator draws a fixed design (X, random-effect covariates, group
//! assignments, true fixed effect) once per scenario and redraws the latent
//! effects and noise per replicate, so truth-dependent summaries are
//! comparable across replicates. Randomness comes from a counter-based
//! generator with one stream per (replicate, purpose): stream ids are
//! `purpose` for shared draws and `(replicate + 1) << 8 | purpose` for
//! per-replicate draws, which makes parallel replicate execution
//! order-independent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::design::{ModelDesign, RandomEffectSpec};
use crate::eb::{HyperSearchSpec, ModeStructure, optimize_hyperparameters};
use crate::em::{fit_ml, EmSettings};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::predict::{
    fixed_effect_covariance, kl_gaussian, mean_squared_error, predict_conditional, NewEffect,
    PredictionProblem,
};
use crate::scalar::Real;

// Stream purposes for the shared (replicate-independent) draws.
const PURPOSE_X: u64 = 0;
const PURPOSE_BETA: u64 = 1;
const PURPOSE_U_BASE: u64 = 2; // + effect index
const PURPOSE_NEW_X: u64 = 16;
const PURPOSE_HOLDOUT_X: u64 = 17;
const PURPOSE_HOLDOUT_U_BASE: u64 = 18; // + effect index
const PURPOSE_HOLDOUT_NEW_X: u64 = 30;
// Per-replicate purposes.
const PURPOSE_GAMMA_BASE: u64 = 64; // + effect index
const PURPOSE_EPS: u64 = 128;
const PURPOSE_HOLDOUT_GAMMA_BASE: u64 = 140; // + effect index
const PURPOSE_HOLDOUT_EPS: u64 = 160;

fn stream_rng(seed: u64, replicate: Option<usize>, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = match replicate {
        None => purpose,
        Some(k) => ((k as u64 + 1) << 8) | purpose,
    };
    rng.set_stream(stream);
    rng
}

/// How observations are assigned to the levels of one factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Contiguous blocks of `n / m` observations per level.
    Blocks,
    /// Observation `i` belongs to level `i mod m`.
    Cyclic,
}

/// Where the random-effect covariates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSource {
    /// First `q_r` columns of X.
    ReuseX,
    /// Intercept column plus fresh standard-normal columns.
    FreshGaussian,
}

/// One simulated random effect.
#[derive(Debug, Clone)]
pub struct EffectScenario<T: Real> {
    pub name: String,
    pub levels: usize,
    pub dim: usize,
    pub source: CovariateSource,
    pub assignment: Assignment,
    /// True covariance of the effect.
    pub sigma0: DMatrix<T>,
}

/// Residual standard deviation rule.
#[derive(Debug, Clone)]
pub enum NoiseRule<T: Real> {
    Explicit(T),
    /// `sigma0^2 = sum_r tr(Sigma0_r)`: under unit-variance covariates the
    /// error variance then matches the total random-effect variance.
    BalanceVariance,
}

#[derive(Debug, Clone)]
pub enum BetaSource<T: Real> {
    StandardNormal,
    Explicit(DVector<T>),
}

/// Full description of a simulation scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig<T: Real> {
    pub n: usize,
    pub p: usize,
    pub effects: Vec<EffectScenario<T>>,
    pub noise: NoiseRule<T>,
    pub beta0: BetaSource<T>,
    pub replicates: usize,
    pub seed: u64,
}

/// Default true covariance: unit diagonal, 0.3 off-diagonal. This is a
/// declared choice, echoed in every report.
pub fn default_sigma0<T: Real>(q: usize) -> DMatrix<T> {
    DMatrix::from_fn(q, q, |i, j| if i == j { T::one() } else { T::of(0.3) })
}

impl<T: Real> ScenarioConfig<T> {
    /// Two crossed random effects over a low-dimensional fixed effect:
    /// individuals observed in blocks, groups balanced cyclically.
    pub fn re_regularization_default(seed: u64) -> Self {
        Self {
            n: 240,
            p: 3,
            effects: vec![
                EffectScenario {
                    name: "ind".into(),
                    levels: 60,
                    dim: 3,
                    source: CovariateSource::ReuseX,
                    assignment: Assignment::Blocks,
                    sigma0: default_sigma0(3),
                },
                EffectScenario {
                    name: "city".into(),
                    levels: 4,
                    dim: 3,
                    source: CovariateSource::ReuseX,
                    assignment: Assignment::Cyclic,
                    sigma0: default_sigma0(3),
                },
            ],
            noise: NoiseRule::BalanceVariance,
            beta0: BetaSource::StandardNormal,
            replicates: 50,
            seed,
        }
    }

    /// High-dimensional fixed effect with a single random effect whose
    /// covariates are distinct from X.
    pub fn joint_regularization_default(seed: u64) -> Self {
        Self {
            n: 96,
            p: 120,
            effects: vec![EffectScenario {
                name: "unit".into(),
                levels: 12,
                dim: 3,
                source: CovariateSource::FreshGaussian,
                assignment: Assignment::Blocks,
                sigma0: default_sigma0(3),
            }],
            noise: NoiseRule::BalanceVariance,
            beta0: BetaSource::StandardNormal,
            replicates: 30,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::invalid("scenario", "n and p must be positive"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("scenario", "replicates must be at least 1"));
        }
        for (r, eff) in self.effects.iter().enumerate() {
            if eff.levels == 0 || eff.dim == 0 {
                return Err(Error::invalid(
                    format!("effect {r}"),
                    "levels and dim must be positive",
                ));
            }
            if eff.levels > self.n {
                return Err(Error::invalid(
                    format!("effect {r}"),
                    "more levels than observations",
                ));
            }
            if eff.assignment == Assignment::Blocks && self.n % eff.levels != 0 {
                return Err(Error::invalid(
                    format!("effect {r}"),
                    "block assignment needs n divisible by the level count",
                ));
            }
            if eff.source == CovariateSource::ReuseX && eff.dim > self.p {
                return Err(Error::invalid(
                    format!("effect {r}"),
                    "reuse-X covariates need dim <= p",
                ));
            }
            if eff.sigma0.nrows() != eff.dim || eff.sigma0.ncols() != eff.dim {
                return Err(Error::DimensionMismatch {
                    what: format!("sigma0 of effect {r}"),
                    expected: eff.dim,
                    got: eff.sigma0.nrows(),
                });
            }
        }
        if let BetaSource::Explicit(b) = &self.beta0 {
            if b.len() != self.p {
                return Err(Error::DimensionMismatch {
                    what: "explicit beta0".into(),
                    expected: self.p,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    fn assignments(&self, r: usize, n: usize) -> Vec<usize> {
        let eff = &self.effects[r];
        match eff.assignment {
            Assignment::Blocks => (0..n).map(|i| i / (n / eff.levels)).collect(),
            Assignment::Cyclic => (0..n).map(|i| i % eff.levels).collect(),
        }
    }

    /// Residual variance implied by the noise rule.
    pub fn sigma0_squared(&self) -> T {
        match &self.noise {
            NoiseRule::Explicit(s) => *s * *s,
            NoiseRule::BalanceVariance => self
                .effects
                .iter()
                .fold(T::zero(), |acc, e| acc + e.sigma0.trace()),
        }
    }
}

fn draw_matrix<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<T>
where
    StandardNormal: rand_distr::Distribution<f64>,
{
    DMatrix::from_fn(rows, cols, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
}

fn spd_sample<T: Real>(rng: &mut ChaCha8Rng, sigma: &DMatrix<T>) -> DVector<T> {
    let q = sigma.nrows();
    let chol = nalgebra::Cholesky::new(sigma.clone()).expect("sigma0 positive definite");
    let z: DVector<T> =
        DVector::from_fn(q, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)));
    chol.l() * z
}

/// Design matrix with an all-ones first column and standard-normal
/// remaining columns.
fn design_x<T: Real>(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<T> {
    let mut x = draw_matrix::<T>(rng, n, p);
    for i in 0..n {
        x[(i, 0)] = T::one();
    }
    x
}

/// Shared (replicate-independent) part of a simulated dataset.
struct SharedDraw<T: Real> {
    x: DMatrix<T>,
    us: Vec<DMatrix<T>>,
    beta0: DVector<T>,
}

fn shared_draw<T: Real>(config: &ScenarioConfig<T>, x_purpose: u64, u_base: u64) -> SharedDraw<T> {
    let x = design_x(&mut stream_rng(config.seed, None, x_purpose), config.n, config.p);
    let us = config
        .effects
        .iter()
        .enumerate()
        .map(|(r, eff)| match eff.source {
            CovariateSource::ReuseX => x.columns(0, eff.dim).into_owned(),
            CovariateSource::FreshGaussian => {
                let mut u = design_x::<T>(
                    &mut stream_rng(config.seed, None, u_base + r as u64),
                    config.n,
                    eff.dim,
                );
                for i in 0..config.n {
                    u[(i, 0)] = T::one();
                }
                u
            }
        })
        .collect();
    let beta0 = match &config.beta0 {
        BetaSource::Explicit(b) => b.clone(),
        BetaSource::StandardNormal => {
            let mut rng = stream_rng(config.seed, None, PURPOSE_BETA);
            DVector::from_fn(config.p, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
        }
    };
    SharedDraw { x, us, beta0 }
}

fn compose_dataset<T: Real>(
    config: &ScenarioConfig<T>,
    shared: &SharedDraw<T>,
    replicate: usize,
    gamma_base: u64,
    eps_purpose: u64,
) -> Result<(ModelDesign<T>, ModelParams<T>, Vec<Vec<DVector<T>>>)> {
    let n = config.n;
    let sigma0_sq = config.sigma0_squared();
    let sigma0 = sigma0_sq.sqrt();
    let mut y = &shared.x * &shared.beta0;
    let mut gammas = Vec::with_capacity(config.effects.len());
    let mut effects = Vec::with_capacity(config.effects.len());
    for (r, eff) in config.effects.iter().enumerate() {
        let mut rng = stream_rng(config.seed, Some(replicate), gamma_base + r as u64);
        let levels: Vec<DVector<T>> = (0..eff.levels)
            .map(|_| spd_sample(&mut rng, &eff.sigma0))
            .collect();
        let groups = config.assignments(r, n);
        for i in 0..n {
            let u_row = shared.us[r].row(i);
            y[i] += (u_row * &levels[groups[i]])[(0, 0)];
        }
        effects.push(RandomEffectSpec::new(groups, eff.levels, shared.us[r].clone())?);
        gammas.push(levels);
    }
    let mut rng = stream_rng(config.seed, Some(replicate), eps_purpose);
    for i in 0..n {
        y[i] += sigma0 * T::of(rng.sample::<f64, _>(StandardNormal));
    }
    let design = ModelDesign::new(y, shared.x.clone(), effects)?;
    let truth = ModelParams {
        beta: shared.beta0.clone(),
        sigmas: config.effects.iter().map(|e| e.sigma0.clone()).collect(),
        sigma2: sigma0_sq,
    };
    Ok((design, truth, gammas))
}

/// Generate replicate `replicate` of the scenario: the design (fixed across
/// replicates), the true parameters, and the latent effect draws.
pub fn generate_dataset<T: Real>(
    config: &ScenarioConfig<T>,
    replicate: usize,
) -> Result<(ModelDesign<T>, ModelParams<T>, Vec<Vec<DVector<T>>>)> {
    config.validate()?;
    let shared = shared_draw(config, PURPOSE_X, PURPOSE_U_BASE);
    compose_dataset(config, &shared, replicate, PURPOSE_GAMMA_BASE, PURPOSE_EPS)
}

/// One tidy report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub replicate: usize,
    pub quantity: String,
    pub estimator: String,
    pub value: f64,
}

/// Study output: tidy rows plus a key/value echo of the configuration.
#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<ReportRow>,
    pub meta: Vec<(String, String)>,
    /// Per-replicate failures (replicate, message); failed replicates keep
    /// a `failed` row in the table.
    pub errors: Vec<(usize, String)>,
}

impl StudyReport {
    /// Tidy CSV: `replicate,quantity,estimator,value`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["replicate", "quantity", "estimator", "value"])?;
        for row in &self.rows {
            wtr.write_record([
                row.replicate.to_string(),
                row.quantity.clone(),
                row.estimator.clone(),
                format!("{}", row.value),
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

    /// Key/value metadata lines (`key: value`), one per configuration item.
    pub fn write_meta<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.meta {
            writeln!(w, "{k}: {v}")?;
        }
        for (rep, msg) in &self.errors {
            writeln!(w, "error_replicate_{rep}: {msg}")?;
        }
        Ok(())
    }

    pub fn values(&self, quantity: &str, estimator: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity && r.estimator == estimator)
            .map(|r| r.value)
            .collect()
    }
}

fn meta_for<T: Real>(config: &ScenarioConfig<T>, options: &StudyOptions<T>) -> Vec<(String, String)> {
    let mut meta = vec![
        ("n".into(), config.n.to_string()),
        ("p".into(), config.p.to_string()),
        ("replicates".into(), config.replicates.to_string()),
        ("seed".into(), config.seed.to_string()),
        (
            "sigma0_rule".into(),
            match &config.noise {
                NoiseRule::Explicit(s) => format!("explicit sd {}", s.as_f64()),
                NoiseRule::BalanceVariance => {
                    "balance-variance: sigma0^2 = sum_r tr(Sigma0_r)".into()
                }
            },
        ),
        (
            "sigma0_squared".into(),
            format!("{}", config.sigma0_squared().as_f64()),
        ),
        (
            "beta0".into(),
            match &config.beta0 {
                BetaSource::StandardNormal => "standard normal, fixed across replicates".into(),
                BetaSource::Explicit(_) => "explicit".into(),
            },
        ),
        ("eb_multistart".into(), options.multistart.to_string()),
        (
            "eb_outer_tolerance".into(),
            format!("{}", options.outer_tolerance.as_f64()),
        ),
    ];
    for (r, eff) in config.effects.iter().enumerate() {
        meta.push((
            format!("effect_{r}"),
            format!(
                "name={} levels={} dim={} source={:?} assignment={:?}",
                eff.name, eff.levels, eff.dim, eff.source, eff.assignment
            ),
        ));
        let entries: Vec<String> = (0..eff.dim)
            .flat_map(|i| {
                let s = &eff.sigma0;
                (0..=i).map(move |j| format!("{}", s[(i, j)].as_f64()))
            })
            .collect();
        meta.push((format!("sigma0_{r}_lower_triangle"), entries.join(" ")));
    }
    meta
}

/// Knobs of the study runners that are not part of the data-generating
/// scenario.
#[derive(Debug, Clone)]
pub struct StudyOptions<T: Real> {
    pub multistart: usize,
    pub outer_tolerance: T,
    pub max_outer_iterations: usize,
    pub inner_tolerance: T,
    pub em: EmSettings<T>,
}

impl<T: Real> Default for StudyOptions<T> {
    fn default() -> Self {
        Self {
            multistart: 2,
            outer_tolerance: T::of(1e-6),
            max_outer_iterations: 60,
            inner_tolerance: T::of(1e-10),
            em: EmSettings::default(),
        }
    }
}

fn search_spec_from<T: Real>(
    n_effects: usize,
    optimize_lambda: bool,
    options: &StudyOptions<T>,
) -> HyperSearchSpec<T> {
    let mut spec = HyperSearchSpec::scalar_identity(n_effects);
    spec.optimize_lambda = optimize_lambda;
    spec.multistart = options.multistart;
    spec.outer_tolerance = options.outer_tolerance;
    spec.max_outer_iterations = options.max_outer_iterations;
    spec.inner_tolerance = options.inner_tolerance;
    spec
}

fn push_params_rows<T: Real>(
    rows: &mut Vec<ReportRow>,
    replicate: usize,
    estimator: &str,
    params: &ModelParams<T>,
) {
    for (i, &b) in params.beta.iter().enumerate() {
        rows.push(ReportRow {
            replicate,
            quantity: format!("beta{}", i + 1),
            estimator: estimator.into(),
            value: b.as_f64(),
        });
    }
    for (r, sigma) in params.sigmas.iter().enumerate() {
        for i in 0..sigma.nrows() {
            for j in 0..=i {
                rows.push(ReportRow {
                    replicate,
                    quantity: format!("Sigma{}_{}{}", r + 1, j + 1, i + 1),
                    estimator: estimator.into(),
                    value: sigma[(i, j)].as_f64(),
                });
            }
        }
    }
    rows.push(ReportRow {
        replicate,
        quantity: "sigma2".into(),
        estimator: estimator.into(),
        value: params.sigma2.as_f64(),
    });
}

/// New observations reusing the fitted units: one per level of effect 0,
/// other effects assigned cyclically, covariates redrawn.
fn same_unit_prediction_problem<T: Real>(
    config: &ScenarioConfig<T>,
    design: &ModelDesign<T>,
    x_purpose: u64,
) -> Result<PredictionProblem<T>> {
    let n_new = config.effects[0].levels;
    let x_new = design_x(
        &mut stream_rng(config.seed, None, x_purpose),
        n_new,
        config.p,
    );
    let mut effects = Vec::with_capacity(config.effects.len());
    for (r, eff) in config.effects.iter().enumerate() {
        let groups: Vec<usize> = if r == 0 {
            (0..n_new).collect()
        } else {
            (0..n_new).map(|i| i % eff.levels).collect()
        };
        let u = match eff.source {
            CovariateSource::ReuseX => x_new.columns(0, eff.dim).into_owned(),
            CovariateSource::FreshGaussian => {
                // Covariates of the new rows for fresh-U effects reuse the
                // same stream family shifted by the effect index.
                let mut u = design_x::<T>(
                    &mut stream_rng(config.seed, None, x_purpose + 32 + r as u64),
                    n_new,
                    eff.dim,
                );
                for i in 0..n_new {
                    u[(i, 0)] = T::one();
                }
                u
            }
        };
        effects.push(NewEffect { groups, u });
    }
    PredictionProblem::new(design.clone(), x_new, effects)
}

fn kl_between_fits<T: Real>(
    problem: &PredictionProblem<T>,
    estimate: &ModelParams<T>,
    truth: &ModelParams<T>,
) -> Result<f64> {
    let p_est = predict_conditional(problem, estimate)?;
    let p_true = predict_conditional(problem, truth)?;
    Ok(kl_gaussian(&p_est, &p_true)?.as_f64())
}

/// Study of random-effect regularization: per replicate, ML and
/// empirical-Bayes fits, fitted hyperparameters, fixed-effect covariance
/// errors, and predictive KL divergences for same-unit and new-unit
/// scenarios.
pub fn run_re_regularization_study<T: Real>(
    config: &ScenarioConfig<T>,
    options: &StudyOptions<T>,
) -> Result<StudyReport> {
    config.validate()?;
    let shared = shared_draw(config, PURPOSE_X, PURPOSE_U_BASE);
    let holdout_shared = shared_draw(config, PURPOSE_HOLDOUT_X, PURPOSE_HOLDOUT_U_BASE);

    let replicate_rows = |k: usize| -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        let (design, truth, _) =
            compose_dataset(config, &shared, k, PURPOSE_GAMMA_BASE, PURPOSE_EPS)?;

        let ml = fit_ml(&design, &options.em)?;
        let spec = search_spec_from(config.effects.len(), false, options);
        let (eb_prior, eb) = optimize_hyperparameters(&design, &spec, &options.em)?;

        for (r, eff_prior) in eb_prior.effects.iter().enumerate() {
            rows.push(ReportRow {
                replicate: k,
                quantity: format!("b{}", r + 1),
                estimator: "eb".into(),
                value: eff_prior.strength.as_f64(),
            });
        }
        rows.push(ReportRow {
            replicate: k,
            quantity: "a".into(),
            estimator: "eb".into(),
            value: eb_prior.effects[0].mode[(0, 0)].as_f64(),
        });
        rows.push(ReportRow {
            replicate: k,
            quantity: "marginal_log_likelihood".into(),
            estimator: "eb".into(),
            value: eb
                .marginal_log_likelihood
                .map(|v| v.as_f64())
                .unwrap_or(f64::NAN),
        });

        push_params_rows(&mut rows, k, "ml", &ml.params);
        push_params_rows(&mut rows, k, "eb", &eb.params);
        push_params_rows(&mut rows, k, "truth", &truth);
        for (fit, est) in [(&ml, "ml"), (&eb, "eb")] {
            rows.push(ReportRow {
                replicate: k,
                quantity: "converged".into(),
                estimator: est.into(),
                value: if fit.converged { 1.0 } else { 0.0 },
            });
        }

        // Fixed-effect covariance errors on the diagonal.
        let c_true = fixed_effect_covariance(&design, &truth)?;
        for (params, est) in [(&ml.params, "ml"), (&eb.params, "eb")] {
            let c_est = fixed_effect_covariance(&design, params)?;
            for i in 0..config.p {
                rows.push(ReportRow {
                    replicate: k,
                    quantity: format!("c_err_{}", i + 1),
                    estimator: est.into(),
                    value: (c_true[(i, i)] - c_est[(i, i)]).abs().as_f64(),
                });
            }
        }

        // Scenario i: predict new outcomes for the fitted units.
        let problem_same = same_unit_prediction_problem(config, &design, PURPOSE_NEW_X)?;
        for (params, est) in [(&ml.params, "ml"), (&eb.params, "eb")] {
            rows.push(ReportRow {
                replicate: k,
                quantity: "kl_same_units".into(),
                estimator: est.into(),
                value: kl_between_fits(&problem_same, params, &truth)?,
            });
        }

        // Scenario ii: an independent dataset with fresh units; the fitted
        // parameters condition on the holdout observations.
        let (holdout_design, _, _) = compose_dataset(
            config,
            &holdout_shared,
            k,
            PURPOSE_HOLDOUT_GAMMA_BASE,
            PURPOSE_HOLDOUT_EPS,
        )?;
        let problem_new =
            same_unit_prediction_problem(config, &holdout_design, PURPOSE_HOLDOUT_NEW_X)?;
        for (params, est) in [(&ml.params, "ml"), (&eb.params, "eb")] {
            rows.push(ReportRow {
                replicate: k,
                quantity: "kl_new_units".into(),
                estimator: est.into(),
                value: kl_between_fits(&problem_new, params, &truth)?,
            });
        }

        Ok(rows)
    };

    let results: Vec<(usize, Result<Vec<ReportRow>>)> = (0..config.replicates)
        .into_par_iter()
        .map(|k| (k, replicate_rows(k)))
        .collect();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (k, res) in results {
        match res {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                rows.push(ReportRow {
                    replicate: k,
                    quantity: "failed".into(),
                    estimator: "any".into(),
                    value: 1.0,
                });
                errors.push((k, e.to_string()));
            }
        }
    }
    Ok(StudyReport {
        rows,
        meta: meta_for(config, options),
        errors,
    })
}

/// Study of joint fixed/random regularization: per replicate, a ridge-only
/// fit (`b = 0`) and a joint fit (ridge plus covariance shrinkage), with
/// fixed-effect errors and predictive KL divergences.
pub fn run_joint_regularization_study<T: Real>(
    config: &ScenarioConfig<T>,
    options: &StudyOptions<T>,
) -> Result<StudyReport> {
    config.validate()?;
    if config.effects.is_empty() {
        return Err(Error::invalid(
            "scenario",
            "the joint-regularization study needs at least one random effect",
        ));
    }
    let shared = shared_draw(config, PURPOSE_X, PURPOSE_U_BASE);

    let replicate_rows = |k: usize| -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        let (design, truth, _) =
            compose_dataset(config, &shared, k, PURPOSE_GAMMA_BASE, PURPOSE_EPS)?;

        // Ridge-only: strengths pinned to zero, lambda searched.
        let mut lambda_only = search_spec_from(config.effects.len(), true, options);
        for (r, eff) in lambda_only.effects.iter_mut().enumerate() {
            eff.structure = ModeStructure::FixedMatrix(DMatrix::identity(
                config.effects[r].dim,
                config.effects[r].dim,
            ));
            eff.fixed_strength = Some(T::zero());
        }
        // Joint: lambda plus per-effect scalar mode and strength.
        let joint = search_spec_from(config.effects.len(), true, options);

        let problem = same_unit_prediction_problem(config, &design, PURPOSE_NEW_X)?;

        for (spec, est) in [(&lambda_only, "lambda_only"), (&joint, "joint")] {
            let (prior, fit) = optimize_hyperparameters(&design, spec, &options.em)?;
            rows.push(ReportRow {
                replicate: k,
                quantity: "lambda".into(),
                estimator: est.into(),
                value: prior.lambda.as_f64(),
            });
            if est == "joint" {
                rows.push(ReportRow {
                    replicate: k,
                    quantity: "b".into(),
                    estimator: est.into(),
                    value: prior.effects[0].strength.as_f64(),
                });
                rows.push(ReportRow {
                    replicate: k,
                    quantity: "a".into(),
                    estimator: est.into(),
                    value: prior.effects[0].mode[(0, 0)].as_f64(),
                });
            }
            rows.push(ReportRow {
                replicate: k,
                quantity: "beta_mse".into(),
                estimator: est.into(),
                value: mean_squared_error(&fit.params.beta, &truth.beta)?.as_f64(),
            });
            rows.push(ReportRow {
                replicate: k,
                quantity: "kl".into(),
                estimator: est.into(),
                value: kl_between_fits(&problem, &fit.params, &truth)?,
            });
            push_params_rows(&mut rows, k, est, &fit.params);
        }
        push_params_rows(&mut rows, k, "truth", &truth);
        Ok(rows)
    };

    let results: Vec<(usize, Result<Vec<ReportRow>>)> = (0..config.replicates)
        .into_par_iter()
        .map(|k| (k, replicate_rows(k)))
        .collect();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (k, res) in results {
        match res {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                rows.push(ReportRow {
                    replicate: k,
                    quantity: "failed".into(),
                    estimator: "any".into(),
                    value: 1.0,
                });
                errors.push((k, e.to_string()));
            }
        }
    }
    Ok(StudyReport {
        rows,
        meta: meta_for(config, options),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ScenarioConfig<f64> {
        ScenarioConfig {
            n: 24,
            p: 2,
            effects: vec![
                EffectScenario {
                    name: "ind".into(),
                    levels: 6,
                    dim: 1,
                    source: CovariateSource::ReuseX,
                    assignment: Assignment::Blocks,
                    sigma0: DMatrix::from_element(1, 1, 1.0),
                },
                EffectScenario {
                    name: "city".into(),
                    levels: 2,
                    dim: 1,
                    source: CovariateSource::ReuseX,
                    assignment: Assignment::Cyclic,
                    sigma0: DMatrix::from_element(1, 1, 0.8),
                },
            ],
            noise: NoiseRule::BalanceVariance,
            beta0: BetaSource::StandardNormal,
            replicates: 2,
            seed,
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let config = tiny_config(7);
        let (d1, t1, g1) = generate_dataset(&config, 1).unwrap();
        let (d2, t2, g2) = generate_dataset(&config, 1).unwrap();
        assert_eq!(d1.y(), d2.y());
        assert_eq!(d1.x(), d2.x());
        assert_eq!(t1.beta, t2.beta);
        assert_eq!(g1, g2);
    }

    #[test]
    fn replicates_share_design_but_not_noise() {
        let config = tiny_config(7);
        let (d1, _, _) = generate_dataset(&config, 0).unwrap();
        let (d2, _, _) = generate_dataset(&config, 1).unwrap();
        assert_eq!(d1.x(), d2.x());
        assert_ne!(d1.y(), d2.y());
    }

    #[test]
    fn default_scenario_dimensions() {
        let config = ScenarioConfig::<f64>::re_regularization_default(1);
        let (design, truth, _) = generate_dataset(&config, 0).unwrap();
        assert_eq!(design.n(), 240);
        assert_eq!(design.p(), 3);
        assert_eq!(design.effect(0).levels(), 60);
        assert_eq!(design.effect(1).levels(), 4);
        assert_eq!(design.effect(0).dim(), 3);
        assert_eq!(design.effect(1).dim(), 3);
        // Every individual observed exactly four times.
        for j in 0..60 {
            assert_eq!(design.effect(0).rows_of_level(j).len(), 4);
        }
        for j in 0..4 {
            assert_eq!(design.effect(1).rows_of_level(j).len(), 60);
        }
        // Balance rule: error variance equals total random-effect variance.
        approx::assert_relative_eq!(truth.sigma2, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn balance_rule_explicit_value() {
        let config = tiny_config(3);
        approx::assert_relative_eq!(config.sigma0_squared(), 1.8, epsilon = 1e-12);
    }

    #[test]
    fn report_csv_is_deterministic() {
        let config = tiny_config(11);
        let options = StudyOptions {
            multistart: 1,
            max_outer_iterations: 15,
            ..StudyOptions::default()
        };
        let r1 = run_re_regularization_study(&config, &options).unwrap();
        let r2 = run_re_regularization_study(&config, &options).unwrap();
        assert!(r1.errors.is_empty(), "replicate failures: {:?}", r1.errors);
        assert_eq!(r1.csv_bytes().unwrap(), r2.csv_bytes().unwrap());
        assert!(!r1.values("b1", "eb").is_empty());
        assert_eq!(r1.values("kl_same_units", "ml").len(), 2);
    }
}
