//! Parametric bootstrap test of `H₀: Aτ = 0`.
//!
//! Replicate responses are drawn from `N(0, Σ(τ̂₀))` at the constrained fit
//! and refit exactly like the observed data. Each replicate owns an RNG
//! substream, so the counts behind the p-values do not depend on how the
//! replicates are scheduled.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::CholFactor;
use crate::error::{Error, Result};
use crate::likelihood::{DesignCache, LikelihoodCache};
use crate::model::{rotation_from_contrast, ContrastSpec, DesignMatrices, Rotation, VarComponents};
use crate::optimizer::{fit_constrained, fit_unconstrained, FitResult, NewtonOptions};
use crate::rng::substream;

/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    /// `λ = L(τ̂₀) − L(τ̂)`.
    #[default]
    Lr,
    /// The unconstrained minimum `L(τ̂)` compared across datasets.
    RawMinimum,
}

impl std::str::FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Statistic::Lr),
            "raw-minimum" => Ok(Statistic::RawMinimum),
            other => Err(Error::InvalidInput(format!("unknown statistic {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub statistic: Statistic,
    /// Report `(k + 1)/(B + 1)` instead of `k/B`.
    pub plus_one: bool,
    /// Thread count; `None` runs in the ambient rayon pool.
    pub workers: Option<usize>,
    pub newton: NewtonOptions,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            statistic: Statistic::Lr,
            plus_one: false,
            workers: None,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub b: usize,
    pub tau_star: VarComponents,
    pub tau_null_star: VarComponents,
    pub lambda_star: f64,
    /// `L*(τ̂*_b)`, the unconstrained minimum on the replicate.
    pub objective_star: f64,
    pub in_cone: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub fit: FitResult,
    pub fit_null: FitResult,
    /// `λ = L(τ̂₀) − L(τ̂)`.
    pub lr_obs: f64,
    pub statistic: Statistic,
    /// Value of the chosen statistic on the observed data.
    pub observed: f64,
    pub draws: Vec<Draw>,
    pub p_two: f64,
    pub p_one: Option<f64>,
    pub mc_se_two: f64,
    pub mc_se_one: Option<f64>,
    /// Requested replicates.
    pub b: usize,
    /// Replicates dropped for failing to converge.
    pub n_failed: usize,
    pub plus_one: bool,
    pub seed: u64,
}

impl TestResult {
    pub fn tau_hat(&self) -> &VarComponents {
        &self.fit.tau_hat
    }

    pub fn tau_null(&self) -> &VarComponents {
        &self.fit_null.tau_hat
    }

    /// Replicates that entered the p-values.
    pub fn b_effective(&self) -> usize {
        self.draws.len()
    }

    /// Two- and one-sided p-values for an arbitrary observed statistic.
    pub fn p_values_at(&self, observed: f64) -> (f64, Option<f64>) {
        p_values(&self.draws, self.statistic, observed, self.plus_one)
    }
}

fn draw_statistic(d: &Draw, statistic: Statistic) -> f64 {
    match statistic {
        Statistic::Lr => d.lambda_star.max(0.0),
        Statistic::RawMinimum => d.objective_star,
    }
}

fn p_values(draws: &[Draw], statistic: Statistic, observed: f64, plus_one: bool) -> (f64, Option<f64>) {
    let mut two = 0usize;
    let mut one = 0usize;
    let mut one_defined = false;
    for d in draws {
        if draw_statistic(d, statistic) >= observed {
            two += 1;
            if d.in_cone == Some(true) {
                one += 1;
            }
        }
        one_defined |= d.in_cone.is_some();
    }
    let ratio = |k: usize| {
        if plus_one {
            (k + 1) as f64 / (draws.len() + 1) as f64
        } else {
            k as f64 / draws.len() as f64
        }
    };
    (ratio(two), one_defined.then(|| ratio(one)))
}

/// `sqrt(p(1 − p)/B)`.
pub fn mc_se(p: f64, b: usize) -> f64 {
    (p * (1.0 - p) / b as f64).sqrt()
}

/// One ambient null draw `ω* = P_Z (L ω_1 ; ω_2)` with `ω ~ N(0, I)`.
pub fn sample_null_ambient<R: Rng + ?Sized>(
    cache: &DesignCache,
    l_null: &CholFactor,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let omega = DVector::from_fn(cache.n(), |_, _| rng.sample(StandardNormal));
    cache.correlate(l_null, omega)
}

/// `U_Xᵀ ω*` before normalization; its law is `N(0, U_XᵀΣ(τ̂₀)U_X)`.
pub fn sample_null_unnormalized<R: Rng + ?Sized>(
    cache: &DesignCache,
    l_null: &CholFactor,
    rng: &mut R,
) -> Result<DVector<f64>> {
    cache.residual_coordinates(&sample_null_ambient(cache, l_null, rng)?)
}

/// The normalized null statistic `q* = U_Xᵀω* / ‖U_Xᵀω*‖`.
pub fn sample_null_residual<R: Rng + ?Sized>(
    cache: &DesignCache,
    l_null: &CholFactor,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let z = sample_null_unnormalized(cache, l_null, rng)?;
    let norm = z.norm();
    Ok(z / norm)
}

struct Setup<'a> {
    cache: &'a Arc<DesignCache>,
    l_null: CholFactor,
    rot: &'a Rotation,
    contrast: &'a ContrastSpec,
    seed: u64,
    newton: NewtonOptions,
}

fn replicate(s: &Setup<'_>, b: usize) -> Option<Draw> {
    let mut rng = substream(s.seed, b as u64);
    let omega = sample_null_ambient(s.cache, &s.l_null, &mut rng).ok()?;
    let lik = LikelihoodCache::new(Arc::clone(s.cache), omega).ok()?;
    let fit = fit_unconstrained(&lik, &s.newton).ok()?;
    let fit0 = fit_constrained(&lik, s.rot, &s.newton).ok()?;
    if !fit.converged() || !fit0.converged() {
        return None;
    }
    Some(Draw {
        b,
        in_cone: s.contrast.in_cone(&fit.tau_hat),
        lambda_star: fit0.objective - fit.objective,
        objective_star: fit.objective,
        tau_star: fit.tau_hat,
        tau_null_star: fit0.tau_hat,
    })
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Bootstrap test using the rotation derived from `contrast`.
pub fn bootstrap_test(
    cache: &Arc<DesignCache>,
    response: &DVector<f64>,
    contrast: &ContrastSpec,
    b: usize,
    seed: u64,
    opts: &TestOptions,
) -> Result<TestResult> {
    let rot = rotation_from_contrast(contrast)?;
    bootstrap_test_rotated(cache, response, contrast, &rot, b, seed, opts)
}

/// As [`bootstrap_test`], building the design cache first.
pub fn bootstrap_test_design(
    design: DesignMatrices,
    response: &DVector<f64>,
    contrast: &ContrastSpec,
    b: usize,
    seed: u64,
    opts: &TestOptions,
) -> Result<TestResult> {
    bootstrap_test(&Arc::new(DesignCache::new(design)?), response, contrast, b, seed, opts)
}

/// Bootstrap test with an explicit rotation (any valid sign convention).
pub fn bootstrap_test_rotated(
    cache: &Arc<DesignCache>,
    response: &DVector<f64>,
    contrast: &ContrastSpec,
    rot: &Rotation,
    b: usize,
    seed: u64,
    opts: &TestOptions,
) -> Result<TestResult> {
    if b == 0 {
        return Err(Error::InvalidInput("bootstrap needs at least one replicate".into()));
    }
    if contrast.d() != cache.d() {
        return Err(Error::DimensionMismatch {
            context: "contrast columns",
            expected: cache.d(),
            found: contrast.d(),
        });
    }
    let lik = LikelihoodCache::new(Arc::clone(cache), response.clone())?;
    let fit = fit_unconstrained(&lik, &opts.newton)?;
    if !fit.converged() {
        return Err(Error::NotConverged {
            what: "unconstrained fit",
            status: format!("{:?}", fit.status),
        });
    }
    let fit_null = fit_constrained(&lik, rot, &opts.newton)?;
    if !fit_null.converged() {
        return Err(Error::NotConverged {
            what: "constrained fit",
            status: format!("{:?}", fit_null.status),
        });
    }
    let lr_obs = fit_null.objective - fit.objective;
    let observed = match opts.statistic {
        Statistic::Lr => lr_obs.max(0.0),
        Statistic::RawMinimum => fit.objective,
    };

    let setup = Setup {
        cache,
        l_null: cache.inner_factor(&fit_null.tau_hat)?,
        rot,
        contrast,
        seed,
        newton: opts.newton,
    };
    let outcomes: Vec<Option<Draw>> = in_pool(opts.workers, || {
        (0..b).into_par_iter().map(|k| replicate(&setup, k)).collect()
    })?;
    let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
    if n_failed as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(Error::BootstrapFailures {
            failed: n_failed,
            total: b,
        });
    }
    let draws: Vec<Draw> = outcomes.into_iter().flatten().collect();
    let (p_two, p_one) = p_values(&draws, opts.statistic, observed, opts.plus_one);
    let b_eff = draws.len();
    Ok(TestResult {
        fit,
        fit_null,
        lr_obs,
        statistic: opts.statistic,
        observed,
        draws,
        p_two,
        p_one,
        mc_se_two: mc_se(p_two, b_eff),
        mc_se_one: p_one.map(|p| mc_se(p, b_eff)),
        b,
        n_failed,
        plus_one: opts.plus_one,
        seed,
    })
}
