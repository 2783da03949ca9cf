//! Twice the normalized-residual negative log-likelihood `L(τ)` and its
//! analytic derivatives.
//!
//! With `P_Z` from a rank-revealing QR of `Z = [Z_1 : … : Z_d]`,
//! `Σ(τ) = P_Z diag(C(τ), I) P_Zᵀ` where `C(τ) = R D(τ) Rᵀ + I_r` and `R`
//! holds the `r = rank(Z)` nonzero rows of `P_Zᵀ Z`. Every product with
//! `Σ⁻¹` goes through the Cholesky factor of the `r × r` matrix `C(τ)`.

use std::ops::Range;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::decomp::{self, CholFactor, Reflectors, SkippingQr};
use crate::error::{Error, Result};
use crate::model::{DesignMatrices, VarComponents, BARRIER_PIVOT_FLOOR};
use crate::optimizer::MomPlan;

/// Response-independent part of the likelihood. Build once per design and
/// share between responses (bootstrap replicates reuse it).
#[derive(Debug, Clone)]
pub struct DesignCache {
    design: DesignMatrices,
    x_reflectors: Reflectors,
    q_x: DMatrix<f64>,
    z_reflectors: Reflectors,
    r_z: DMatrix<f64>,
    grams: Vec<DMatrix<f64>>,
    t1: DMatrix<f64>,
    t2: DMatrix<f64>,
    t2_gram: DMatrix<f64>,
    mom: OnceLock<Result<MomPlan>>,
}

impl DesignCache {
    pub fn new(design: DesignMatrices) -> Result<Self> {
        let xqr = decomp::householder_qr(design.x())?;
        let q_x = xqr.thin_q();
        let zqr = SkippingQr::new(design.z_concat())?;
        let rank = zqr.rank();
        if rank == 0 {
            return Err(Error::InvalidDesign("random-effect matrix Z is zero".into()));
        }
        let r_z = zqr.transformed().rows(0, rank).into_owned();
        let grams = design
            .block_ranges()
            .iter()
            .map(|range| {
                let rj = r_z.columns(range.start, range.len());
                &rj * rj.transpose()
            })
            .collect();
        let z_reflectors = zqr.reflectors().clone();
        let t = z_reflectors.apply_qt_mat(&q_x)?;
        let n = design.n();
        let t1 = t.rows(0, rank).into_owned();
        let t2 = t.rows(rank, n - rank).into_owned();
        let t2_gram = t2.tr_mul(&t2);
        Ok(DesignCache {
            design,
            x_reflectors: xqr.reflectors().clone(),
            q_x,
            z_reflectors,
            r_z,
            grams,
            t1,
            t2,
            t2_gram,
            mom: OnceLock::new(),
        })
    }

    pub fn design(&self) -> &DesignMatrices {
        &self.design
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    pub fn d(&self) -> usize {
        self.design.d()
    }

    /// Rank of `Z`, the dimension of the inner Cholesky factorization.
    pub fn rank_z(&self) -> usize {
        self.r_z.nrows()
    }

    /// Explicit `Q_X`.
    pub fn q_x(&self) -> &DMatrix<f64> {
        &self.q_x
    }

    /// Reflectors of `P_Z`.
    pub fn z_reflectors(&self) -> &Reflectors {
        &self.z_reflectors
    }

    /// `rank(Z) × m` block of `P_Zᵀ Z`.
    pub fn r_z(&self) -> &DMatrix<f64> {
        &self.r_z
    }

    /// Moment-equation plan, built on first use.
    pub fn mom_plan(&self) -> Result<&MomPlan> {
        self.mom
            .get_or_init(|| MomPlan::new(&self.design))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn blocks(&self) -> &[Range<usize>] {
        self.design.block_ranges()
    }

    /// Cholesky factor of `C(τ) = R D(τ) Rᵀ + I_r`; fails with
    /// [`Error::OutsideParameterSpace`] exactly when `Σ(τ)` is not positive
    /// definite.
    pub fn inner_factor(&self, tau: &VarComponents) -> Result<CholFactor> {
        self.check_tau(tau)?;
        let r = self.rank_z();
        let mut c = DMatrix::identity(r, r);
        for (g, &t) in self.grams.iter().zip(tau.as_slice()) {
            if t != 0.0 {
                c += g * t;
            }
        }
        decomp::cholesky_with_floor(&c, BARRIER_PIVOT_FLOOR)
            .map_err(|_| Error::OutsideParameterSpace)
    }

    pub fn in_parameter_space(&self, tau: &VarComponents) -> bool {
        self.inner_factor(tau).is_ok()
    }

    /// `P_Z (L ω_1 ; ω_2)` for white noise `ω`: a draw from `N(0, Σ(τ))` when
    /// `L` is [`DesignCache::inner_factor`] at `τ`.
    pub fn correlate(&self, l: &CholFactor, mut omega: DVector<f64>) -> Result<DVector<f64>> {
        let r = self.rank_z();
        if l.dim() != r {
            return Err(Error::DimensionMismatch {
                context: "inner Cholesky factor",
                expected: r,
                found: l.dim(),
            });
        }
        if omega.len() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "noise vector",
                expected: self.n(),
                found: omega.len(),
            });
        }
        let head = l.lower() * omega.rows(0, r);
        omega.rows_mut(0, r).copy_from(&head);
        self.z_reflectors.apply_q_slice(omega.as_mut_slice());
        Ok(omega)
    }

    /// `U_Xᵀ v`, an `(N - p)`-vector in the implicit residual basis.
    pub fn residual_coordinates(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.x_reflectors.apply_qt(v)?;
        Ok(w.rows(self.p(), self.n() - self.p()).into_owned())
    }

    fn check_tau(&self, tau: &VarComponents) -> Result<()> {
        if tau.len() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "variance components",
                expected: self.d(),
                found: tau.len(),
            });
        }
        Ok(())
    }
}

/// Everything needed for repeated evaluation of `L(τ)` on one response.
#[derive(Debug, Clone)]
pub struct LikelihoodCache {
    design: Arc<DesignCache>,
    y: DVector<f64>,
    ty1: DVector<f64>,
    ty2: DVector<f64>,
    t2ty2: DVector<f64>,
    resid_ss: f64,
}

impl LikelihoodCache {
    pub fn new(design: Arc<DesignCache>, y: DVector<f64>) -> Result<Self> {
        let n = design.n();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                context: "response length",
                expected: n,
                found: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        let resid = design.residual_coordinates(&y)?;
        let resid_ss = resid.norm_squared();
        let scale = y.norm_squared();
        if resid_ss <= (64.0 * n as f64 * f64::EPSILON).powi(2) * scale || resid_ss == 0.0 {
            return Err(Error::DegenerateResponse(
                "response lies in the column space of X",
            ));
        }
        let ty = design.z_reflectors.apply_qt(&y)?;
        let r = design.rank_z();
        let ty1 = ty.rows(0, r).into_owned();
        let ty2 = ty.rows(r, n - r).into_owned();
        let t2ty2 = design.t2.tr_mul(&ty2);
        Ok(LikelihoodCache {
            design,
            y,
            ty1,
            ty2,
            t2ty2,
            resid_ss,
        })
    }

    pub fn design_cache(&self) -> &Arc<DesignCache> {
        &self.design
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    /// `‖U_Xᵀ y‖²`.
    pub fn resid_ss(&self) -> f64 {
        self.resid_ss
    }

    /// `P_Zᵀ y`.
    pub fn tilde_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.y.len());
        let r = self.ty1.len();
        out.rows_mut(0, r).copy_from(&self.ty1);
        out.rows_mut(r, self.ty2.len()).copy_from(&self.ty2);
        out
    }

    pub fn d(&self) -> usize {
        self.design.d()
    }
}

/// Build the shared design cache and the response cache in one step.
pub fn precompute(design: DesignMatrices, response: DVector<f64>) -> Result<LikelihoodCache> {
    LikelihoodCache::new(Arc::new(DesignCache::new(design)?), response)
}

/// How much of the objective to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Need {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

/// Evaluate `L(τ)` and, on request, its gradient and Hessian.
pub fn evaluate(cache: &LikelihoodCache, tau: &VarComponents, need: Need) -> Result<Objective> {
    let dc = &*cache.design;
    let l = dc.inner_factor(tau)?;
    let numeric = || Error::NumericFailure {
        tau: tau.as_slice().to_vec(),
    };

    let a = l.solve_lower_vec(&cache.ty1);
    let b = l.solve_lower_mat(&dc.t1);
    let m = b.tr_mul(&b) + &dc.t2_gram;
    let lm = decomp::cholesky(&m).map_err(|_| numeric())?;
    let xsy = b.tr_mul(&a) + &cache.t2ty2;
    let beta = lm.solve_vec(&xsy);
    let r1 = &a - &b * &beta;
    let r2 = &cache.ty2 - &dc.t2 * &beta;
    let quad = r1.norm_squared() + r2.norm_squared();
    let dof = (dc.n() - dc.p()) as f64;
    let value = l.log_det() + lm.log_det() + dof * (quad / cache.resid_ss).ln();
    if !value.is_finite() || !(quad > 0.0) {
        return Err(numeric());
    }
    if need == Need::Value {
        return Ok(Objective {
            value,
            gradient: None,
            hessian: None,
        });
    }

    // J = L⁻¹R, u = ZᵀΠy, E = Lm⁻¹BᵀJ, S = ZᵀΠZ = JᵀJ − EᵀE.
    let j = l.solve_lower_mat(&dc.r_z);
    let u = j.tr_mul(&r1);
    let e = lm.solve_lower_mat(&b.tr_mul(&j));
    let blocks = dc.blocks();
    let d = blocks.len();
    let u_sq: Vec<f64> = blocks
        .iter()
        .map(|rg| u.rows(rg.start, rg.len()).norm_squared())
        .collect();

    let mut grad = DVector::zeros(d);
    let hessian = if need == Need::Hessian {
        let s = j.tr_mul(&j) - e.tr_mul(&e);
        let mut h = DMatrix::zeros(d, d);
        let su: Vec<DVector<f64>> = blocks
            .iter()
            .map(|rg| s.columns(rg.start, rg.len()) * u.rows(rg.start, rg.len()))
            .collect();
        for (jj, rj) in blocks.iter().enumerate() {
            grad[jj] = (rj.start..rj.end).map(|c| s[(c, c)]).sum::<f64>()
                - dof * u_sq[jj] / quad;
            for (kk, rk) in blocks.iter().enumerate().skip(jj) {
                let frob = s.view((rj.start, rk.start), (rj.len(), rk.len())).norm_squared();
                let cross = u.rows(rj.start, rj.len()).dot(&su[kk].rows(rj.start, rj.len()));
                let v = -frob
                    + dof * (2.0 * cross / quad - u_sq[jj] * u_sq[kk] / (quad * quad));
                h[(jj, kk)] = v;
                h[(kk, jj)] = v;
            }
        }
        Some(h)
    } else {
        for (jj, rj) in blocks.iter().enumerate() {
            let tr_j: f64 = (rj.start..rj.end)
                .map(|c| j.column(c).norm_squared() - e.column(c).norm_squared())
                .sum();
            grad[jj] = tr_j - dof * u_sq[jj] / quad;
        }
        None
    };
    if grad.iter().any(|v| !v.is_finite())
        || hessian.as_ref().is_some_and(|h| h.iter().any(|v| !v.is_finite()))
    {
        return Err(numeric());
    }
    Ok(Objective {
        value,
        gradient: Some(grad),
        hessian,
    })
}

pub fn nrll(cache: &LikelihoodCache, tau: &VarComponents) -> Result<f64> {
    Ok(evaluate(cache, tau, Need::Value)?.value)
}

pub fn nrll_gradient(cache: &LikelihoodCache, tau: &VarComponents) -> Result<DVector<f64>> {
    Ok(evaluate(cache, tau, Need::Gradient)?.gradient.expect("gradient requested"))
}

pub fn nrll_hessian(cache: &LikelihoodCache, tau: &VarComponents) -> Result<DMatrix<f64>> {
    Ok(evaluate(cache, tau, Need::Hessian)?.hessian.expect("hessian requested"))
}
