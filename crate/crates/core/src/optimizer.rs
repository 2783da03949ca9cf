//! Method-of-moments starting values and the modified Newton minimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomp::{self, Reflectors, SkippingQr};
use crate::error::{Error, Result};
use crate::likelihood::{evaluate, LikelihoodCache, Need, Objective};
use crate::model::{DesignMatrices, Rotation, VarComponents};

/// Hessian eigenvalues below this at convergence mark a non-minimum.
pub const NEGATIVE_CURVATURE_TOL: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub kappa: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub monotone_guard: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            kappa: 1e-3,
            grad_tol: 1e-6,
            max_iter: 100,
            max_halvings: 60,
            monotone_guard: true,
        }
    }
}

impl NewtonOptions {
    fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidInput("kappa and grad_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LocalGeometry(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub objective: f64,
    pub grad_norm: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub tau_hat: VarComponents,
    pub objective: f64,
    /// ∞-norm of the gradient in the optimized coordinates.
    pub grad_norm: f64,
    pub iterations: usize,
    pub halvings_total: usize,
    /// Descending; in the optimized coordinates.
    pub hessian_eigenvalues: Vec<f64>,
    pub status: FitStatus,
    pub trace: Vec<IterationRecord>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }
}

/// A smooth function on an open domain. Points outside the domain report
/// [`Error::OutsideParameterSpace`].
pub trait NewtonObjective {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, need: Need) -> Result<Objective>;
}

/// Result of [`modified_newton`] in the objective's own coordinates.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub halvings_total: usize,
    pub hessian_eigenvalues: Vec<f64>,
    pub status: FitStatus,
    pub trace: Vec<IterationRecord>,
}

fn is_rejectable(e: &Error) -> bool {
    matches!(e, Error::OutsideParameterSpace | Error::NumericFailure { .. })
}

/// Newton iteration with the Hessian replaced by `B diag(|λ| + κ) Bᵀ` and
/// step halving on domain exit (and, with the guard, on ascent).
pub fn modified_newton<F: NewtonObjective>(
    f: &F,
    x0: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome> {
    opts.validate()?;
    if x0.len() != f.dim() {
        return Err(Error::DimensionMismatch {
            context: "Newton starting point",
            expected: f.dim(),
            found: x0.len(),
        });
    }
    let mut x = x0;
    let mut cur = None;
    for _ in 0..=opts.max_halvings {
        match f.eval(&x, Need::Hessian) {
            Ok(o) => {
                cur = Some(o);
                break;
            }
            Err(e) if is_rejectable(&e) => x *= 0.5,
            Err(e) => return Err(e),
        }
    }
    let mut cur = match cur {
        Some(o) => o,
        None => {
            x.fill(0.0);
            f.eval(&x, Need::Hessian)?
        }
    };

    let mut trace = Vec::new();
    let mut halvings_total = 0;
    let mut iterations = 0;
    loop {
        let g = cur.gradient.as_ref().expect("gradient requested");
        let h = cur.hessian.as_ref().expect("hessian requested");
        let grad_norm = g.amax();
        let eig = decomp::sym_eig(h)?;
        let eigenvalues: Vec<f64> = eig.values.iter().copied().collect();
        let finish = |status, halvings_total, trace: &Vec<IterationRecord>| NewtonOutcome {
            x: x.clone(),
            objective: cur.value,
            grad_norm,
            iterations,
            halvings_total,
            hessian_eigenvalues: eigenvalues.clone(),
            status,
            trace: trace.clone(),
        };
        if grad_norm < opts.grad_tol {
            let min = eigenvalues.last().copied().unwrap_or(0.0);
            let status = if min < NEGATIVE_CURVATURE_TOL {
                FitStatus::LocalGeometry(format!(
                    "stationary point with negative Hessian eigenvalue {min:e}"
                ))
            } else {
                FitStatus::Converged
            };
            return Ok(finish(status, halvings_total, &trace));
        }
        if iterations >= opts.max_iter {
            return Ok(finish(FitStatus::MaxIterations, halvings_total, &trace));
        }

        let bg = eig.vectors.tr_mul(g);
        let scaled = DVector::from_fn(bg.len(), |i, _| bg[i] / (eig.values[i].abs() + opts.kappa));
        let step = -(&eig.vectors * scaled);
        let mut cand = &x + &step;
        let slack = 1e-12 * (1.0 + cur.value.abs());
        let mut halvings = 0;
        loop {
            let accepted = match f.eval(&cand, Need::Value) {
                Ok(o) => !opts.monotone_guard || o.value <= cur.value + slack,
                Err(e) if is_rejectable(&e) => false,
                Err(e) => return Err(e),
            };
            if accepted {
                break;
            }
            if halvings == opts.max_halvings {
                return Ok(finish(
                    FitStatus::LocalGeometry(format!(
                        "step halving exhausted after {halvings} halvings at iteration {iterations}"
                    )),
                    halvings_total + halvings,
                    &trace,
                ));
            }
            cand = (&x + &cand) * 0.5;
            halvings += 1;
        }
        halvings_total += halvings;
        x = cand;
        cur = f.eval(&x, Need::Hessian)?;
        iterations += 1;
        trace.push(IterationRecord {
            objective: cur.value,
            grad_norm: cur.gradient.as_ref().expect("gradient requested").amax(),
            halvings,
        });
    }
}

/// `L(τ)` as a Newton objective, optionally restricted to `τ = Q₂ τ̃₂`.
pub struct LikelihoodObjective<'a> {
    cache: &'a LikelihoodCache,
    basis: Option<DMatrix<f64>>,
}

impl<'a> LikelihoodObjective<'a> {
    pub fn unconstrained(cache: &'a LikelihoodCache) -> Self {
        LikelihoodObjective { cache, basis: None }
    }

    pub fn restricted(cache: &'a LikelihoodCache, q2: DMatrix<f64>) -> Self {
        LikelihoodObjective {
            cache,
            basis: Some(q2),
        }
    }

    pub fn to_tau(&self, x: &DVector<f64>) -> VarComponents {
        match &self.basis {
            None => VarComponents::from_vector(x),
            Some(q) => VarComponents::from_vector(&(q * x)),
        }
    }
}

impl NewtonObjective for LikelihoodObjective<'_> {
    fn dim(&self) -> usize {
        self.basis.as_ref().map_or(self.cache.d(), |q| q.ncols())
    }

    fn eval(&self, x: &DVector<f64>, need: Need) -> Result<Objective> {
        let obj = evaluate(self.cache, &self.to_tau(x), need)?;
        let Some(q) = &self.basis else {
            return Ok(obj);
        };
        Ok(Objective {
            value: obj.value,
            gradient: obj.gradient.map(|g| q.tr_mul(&g)),
            hessian: obj.hessian.map(|h| q.tr_mul(&(h * q))),
        })
    }
}

/// Response-independent part of the moment equations: one rank-revealing
/// QR of `[X, Z_{o(1)}, …, Z_{o(d)}]` for a component order `o`.
///
/// The order is the given one when every component raises the rank of its
/// predecessors; otherwise (an inner nested factor listed first, say) the
/// first working order among "fewest levels first" and, for small `d`, all
/// permutations. Solutions are reported in the original order.
#[derive(Debug, Clone)]
pub struct MomPlan {
    reflectors: Reflectors,
    /// `order[i]` is the component eliminated at step `i`.
    order: Vec<usize>,
    /// `k_i = rank [X, Z_{o(1)}..Z_{o(i)}]`, `i = 0..=d`.
    ranks: Vec<usize>,
    /// `coef[(i, k)]`, the expected contribution of `τ_{o(k)}` to `SS_i / σ²`.
    coef: DMatrix<f64>,
    n: usize,
}

/// Largest `d` for which every component order is tried.
const MOM_PERMUTATION_LIMIT: usize = 6;

fn permutations(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(d - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, d - 1);
            out.push(p);
        }
    }
    out
}

impl MomPlan {
    pub fn new(design: &DesignMatrices) -> Result<Self> {
        let d = design.d();
        let given: Vec<usize> = (0..d).collect();
        let first_err = match Self::with_order(design, given.clone()) {
            Ok(plan) => return Ok(plan),
            Err(e @ Error::ConfoundedDesign { .. }) => e,
            Err(e) => return Err(e),
        };
        let mut by_levels = given.clone();
        by_levels.sort_by_key(|&j| design.block_range(j).len());
        let mut candidates = vec![by_levels];
        if d <= MOM_PERMUTATION_LIMIT {
            candidates.extend(permutations(d));
        }
        for order in candidates {
            if order == given {
                continue;
            }
            match Self::with_order(design, order) {
                Ok(plan) => return Ok(plan),
                Err(Error::ConfoundedDesign { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Err(first_err)
    }

    fn with_order(design: &DesignMatrices, order: Vec<usize>) -> Result<Self> {
        let n = design.n();
        let p = design.p();
        let d = design.d();
        let mut full = DMatrix::zeros(n, p + design.m());
        full.columns_mut(0, p).copy_from(design.x());
        let mut offsets = Vec::with_capacity(d);
        let mut at = p;
        for &j in &order {
            let range = design.block_range(j);
            full.columns_mut(at, range.len())
                .copy_from(&design.z_concat().columns(range.start, range.len()));
            offsets.push(at);
            at += range.len();
        }
        let qr = SkippingQr::new(&full)?;
        let ranks: Vec<usize> = (0..=d)
            .map(|i| {
                let cols = if i == 0 { p } else { offsets[i - 1] + design.block_range(order[i - 1]).len() };
                qr.rank_of_prefix(cols)
            })
            .collect();
        for i in 1..=d {
            if ranks[i] == ranks[i - 1] {
                return Err(Error::ConfoundedDesign { component: order[i - 1] });
            }
        }
        if ranks[d] >= n {
            return Err(Error::InvalidDesign(
                "no residual degrees of freedom after all random effects".into(),
            ));
        }
        // tr(U_iᵀ V_k U_i) = squared norm of rows ≥ k_i of Pᵀ Z_k.
        let t = qr.transformed();
        let trace = |i: usize, k: usize| -> f64 {
            let width = design.block_range(order[k]).len();
            let rows = ranks[i];
            t.view((rows, offsets[k]), (n - rows, width)).norm_squared()
        };
        let mut coef = DMatrix::zeros(d, d);
        for i in 0..d {
            for k in i..d {
                let after = if k == i { 0.0 } else { trace(i + 1, k) };
                coef[(i, k)] = trace(i, k) - after;
            }
        }
        Ok(MomPlan {
            reflectors: qr.reflectors().clone(),
            order,
            ranks,
            coef,
            n,
        })
    }

    /// Elimination order of the components.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Residual dimensions `r_i = N - k_i` for `i = 0..=d`, in elimination order.
    pub fn residual_dims(&self) -> Vec<usize> {
        self.ranks.iter().map(|k| self.n - k).collect()
    }

    /// The upper-triangular system matrix, in elimination order.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coef
    }

    /// Solve the moment equations for the response `y`.
    pub fn solve(&self, y: &DVector<f64>) -> Result<VarComponents> {
        let w = self.reflectors.apply_qt(y)?;
        let tail = |k: usize| -> f64 { w.rows(k, self.n - k).norm_squared() };
        let d = self.coef.nrows();
        let r = self.residual_dims();
        let sigma2 = tail(self.ranks[d]) / r[d] as f64;
        if !(sigma2 > 0.0) {
            return Err(Error::DegenerateResponse(
                "zero residual sum of squares after all random effects",
            ));
        }
        let s = DVector::from_fn(d, |i, _| {
            let ss = tail(self.ranks[i]) - tail(self.ranks[i + 1]);
            ss / sigma2 + r[i + 1] as f64 - r[i] as f64
        });
        let solved = decomp::solve_triangular_vec(&self.coef, decomp::Triangle::Upper, &s, false)?;
        let mut tau = vec![0.0; d];
        for (i, &j) in self.order.iter().enumerate() {
            tau[j] = solved[i];
        }
        VarComponents::new(tau)
    }
}

/// Method-of-moments starting value for the response held by `cache`.
pub fn mom_start(cache: &LikelihoodCache) -> Result<VarComponents> {
    cache.design_cache().mom_plan()?.solve(cache.response())
}

fn into_fit(outcome: NewtonOutcome, tau_hat: VarComponents) -> FitResult {
    FitResult {
        tau_hat,
        objective: outcome.objective,
        grad_norm: outcome.grad_norm,
        iterations: outcome.iterations,
        halvings_total: outcome.halvings_total,
        hessian_eigenvalues: outcome.hessian_eigenvalues,
        status: outcome.status,
        trace: outcome.trace,
    }
}

/// `τ̂ = argmin L(τ)` over the parameter space, started from the moments.
pub fn fit_unconstrained(cache: &LikelihoodCache, opts: &NewtonOptions) -> Result<FitResult> {
    let start = mom_start(cache)?;
    fit_from(cache, start, opts)
}

/// As [`fit_unconstrained`] with an explicit starting value.
pub fn fit_from(
    cache: &LikelihoodCache,
    start: VarComponents,
    opts: &NewtonOptions,
) -> Result<FitResult> {
    let obj = LikelihoodObjective::unconstrained(cache);
    let out = modified_newton(&obj, start.to_vector(), opts)?;
    let tau = obj.to_tau(&out.x);
    Ok(into_fit(out, tau))
}

/// `τ̂₀ = argmin L(τ)` subject to `Aτ = 0`, optimized over `τ = Q₂ τ̃₂`.
pub fn fit_constrained(
    cache: &LikelihoodCache,
    rot: &Rotation,
    opts: &NewtonOptions,
) -> Result<FitResult> {
    let d = cache.d();
    if rot.q_full().nrows() != d {
        return Err(Error::DimensionMismatch {
            context: "rotation dimension",
            expected: d,
            found: rot.q_full().nrows(),
        });
    }
    if rot.null_dim() == 0 {
        let zero = VarComponents::zeros(d);
        let value = evaluate(cache, &zero, Need::Value)?.value;
        return Ok(FitResult {
            tau_hat: zero,
            objective: value,
            grad_norm: 0.0,
            iterations: 0,
            halvings_total: 0,
            hessian_eigenvalues: Vec::new(),
            status: FitStatus::Converged,
            trace: Vec::new(),
        });
    }
    let start = rot.project(&mom_start(cache)?);
    let obj = LikelihoodObjective::restricted(cache, rot.q2());
    let out = modified_newton(&obj, start, opts)?;
    let tau = obj.to_tau(&out.x);
    Ok(into_fit(out, tau))
}
