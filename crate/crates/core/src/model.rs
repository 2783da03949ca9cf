//! Model definition: design matrices, variance components, the
//! spectrahedral parameter space and the contrast rotation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomp::{self, CholFactor, QrFactor, SkippingQr};
use crate::error::{Error, Result};

/// Cholesky pivots at or below this value put `τ` outside the parameter
/// space. The likelihood is a barrier, so values this close to the boundary
/// only produce overflow in the log terms.
pub const BARRIER_PIVOT_FLOOR: f64 = 1e-12;

/// Fixed-effect matrix `X` and random-effect blocks `Z_1, …, Z_d`.
///
/// The variance-component matrices are `V_j = Z_j Z_jᵀ`; they are never
/// formed except by [`DesignMatrices::v_matrix`], which exists for checks.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    x: DMatrix<f64>,
    z_concat: DMatrix<f64>,
    blocks: Vec<Range<usize>>,
    block_of_column: Vec<usize>,
}

impl DesignMatrices {
    pub fn new(x: DMatrix<f64>, z_blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let (n, p) = x.shape();
        if p == 0 {
            return Err(Error::InvalidDesign("X needs at least one column".into()));
        }
        if z_blocks.is_empty() {
            return Err(Error::InvalidDesign("at least one random-effect block is required".into()));
        }
        if n <= p {
            return Err(Error::InvalidDesign(format!(
                "need more observations ({n}) than fixed effects ({p})"
            )));
        }
        if x.iter().chain(z_blocks.iter().flat_map(|z| z.iter())).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrices"));
        }
        let mut blocks = Vec::with_capacity(z_blocks.len());
        let mut start = 0;
        for (j, z) in z_blocks.iter().enumerate() {
            if z.nrows() != n {
                return Err(Error::DimensionMismatch {
                    context: "random-effect block rows",
                    expected: n,
                    found: z.nrows(),
                });
            }
            if z.ncols() == 0 {
                return Err(Error::InvalidDesign(format!("block {j} has no columns")));
            }
            blocks.push(start..start + z.ncols());
            start += z.ncols();
        }
        let m = start;
        let rank = SkippingQr::new(&x)?.rank();
        if rank != p {
            return Err(Error::RankDeficient {
                what: "fixed-effect matrix X",
                rank,
                expected: p,
            });
        }
        let mut z_concat = DMatrix::zeros(n, m);
        let mut block_of_column = vec![0; m];
        for (j, (z, range)) in z_blocks.iter().zip(&blocks).enumerate() {
            z_concat.columns_mut(range.start, range.len()).copy_from(z);
            block_of_column[range.clone()].iter_mut().for_each(|b| *b = j);
        }
        Ok(DesignMatrices {
            x,
            z_concat,
            blocks,
            block_of_column,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of random-effect columns.
    pub fn m(&self) -> usize {
        self.z_concat.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z_concat(&self) -> &DMatrix<f64> {
        &self.z_concat
    }

    pub fn block_range(&self, j: usize) -> Range<usize> {
        self.blocks[j].clone()
    }

    pub fn block_ranges(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|r| r.len()).collect()
    }

    pub fn block_of_column(&self, c: usize) -> usize {
        self.block_of_column[c]
    }

    pub fn z_block(&self, j: usize) -> DMatrix<f64> {
        let r = &self.blocks[j];
        self.z_concat.columns(r.start, r.len()).into_owned()
    }

    /// Dense `V_j = Z_j Z_jᵀ`.
    pub fn v_matrix(&self, j: usize) -> DMatrix<f64> {
        let z = self.z_block(j);
        &z * z.transpose()
    }

    /// Dense `Σ(τ) = I + Σ_j τ_j V_j`.
    pub fn sigma(&self, tau: &VarComponents) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.n(), self.n());
        for j in 0..self.d() {
            s += self.v_matrix(j) * tau[j];
        }
        s
    }

    /// The diagonal of `D(τ)`: `τ_j` repeated for every column of block `j`.
    pub fn expand(&self, tau: &VarComponents) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.block_of_column.iter().map(|&j| tau[j]))
    }

    /// Householder QR of `[Z_1 : … : Z_d]`. Needs `N ≥ m`; the likelihood
    /// path uses a rank-revealing factorization and has no such limit.
    pub fn z_qr(&self) -> Result<QrFactor> {
        decomp::householder_qr(&self.z_concat)
    }
}

/// Variance components `τ`, ratios of each random-effect variance to the
/// residual variance. Any sign is allowed; membership in the parameter space
/// is a separate question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarComponents(Vec<f64>);

impl VarComponents {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variance components"));
        }
        Ok(VarComponents(values))
    }

    pub fn zeros(d: usize) -> Self {
        VarComponents(vec![0.0; d])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        VarComponents(v.iter().copied().collect())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for VarComponents {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Direction constraint on one row of `Aτ` under a one-sided alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowConstraint {
    Greater,
    Less,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// One constraint per row of `A`; the alternative is `Aτ ∈ C` for the
    /// cone `C` they describe.
    OneSided(Vec<RowConstraint>),
}

/// Contrast matrix `A` (`d₀ × d`, full row rank) with its alternative.
#[derive(Debug, Clone)]
pub struct ContrastSpec {
    a: DMatrix<f64>,
    alternative: Alternative,
}

impl ContrastSpec {
    pub fn new(a: DMatrix<f64>, alternative: Alternative) -> Result<Self> {
        let (d0, d) = a.shape();
        if d0 == 0 || d0 > d {
            return Err(Error::InvalidInput(format!(
                "contrast matrix must have between 1 and {d} rows, got {d0}"
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("contrast matrix"));
        }
        if let Alternative::OneSided(cone) = &alternative {
            if cone.len() != d0 {
                return Err(Error::InvalidInput(format!(
                    "one-sided alternative needs {d0} row constraints, got {}",
                    cone.len()
                )));
            }
            if cone.iter().all(|c| *c == RowConstraint::Free) {
                return Err(Error::InvalidInput(
                    "one-sided alternative constrains no row".into(),
                ));
            }
        }
        let rank = numerical_rank(&a.transpose())?;
        if rank != d0 {
            return Err(Error::RankDeficient {
                what: "contrast matrix A",
                rank,
                expected: d0,
            });
        }
        Ok(ContrastSpec { a, alternative })
    }

    /// Two-sided test of `τ_i = τ_j`.
    pub fn equality(d: usize, i: usize, j: usize) -> Result<Self> {
        let mut a = DMatrix::zeros(1, d);
        a[(0, i)] = 1.0;
        a[(0, j)] = -1.0;
        ContrastSpec::new(a, Alternative::TwoSided)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn alternative(&self) -> &Alternative {
        &self.alternative
    }

    pub fn with_alternative(&self, alternative: Alternative) -> Result<Self> {
        ContrastSpec::new(self.a.clone(), alternative)
    }

    pub fn d0(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    /// Whether `Aτ` lies in the one-sided cone. Always `None` for two-sided
    /// alternatives.
    pub fn in_cone(&self, tau: &VarComponents) -> Option<bool> {
        let Alternative::OneSided(cone) = &self.alternative else {
            return None;
        };
        let at = &self.a * tau.to_vector();
        Some(cone.iter().zip(at.iter()).all(|(c, &v)| match c {
            RowConstraint::Greater => v > 0.0,
            RowConstraint::Less => v < 0.0,
            RowConstraint::Free => true,
        }))
    }
}

/// Rank by the QR diagonal rule `|R_ii| ≤ rows · ε · max_j |R_jj|`.
fn numerical_rank(m: &DMatrix<f64>) -> Result<usize> {
    let qr = decomp::householder_qr(m)?;
    let diag: Vec<f64> = qr.r().diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let tol = m.nrows() as f64 * f64::EPSILON * max;
    Ok(diag.iter().filter(|&&v| v > tol && v > 0.0).count())
}

/// `Aᵀ = Q_A (R_Aᵀ, 0ᵀ)ᵀ` with `Q_A = [Q_1 : Q_2]`.
///
/// `Aτ = 0` exactly when `Q_1ᵀ τ = 0`, so the null set is `{Q_2 τ̃_2}`.
#[derive(Debug, Clone)]
pub struct Rotation {
    q_full: DMatrix<f64>,
    r_a: DMatrix<f64>,
    d0: usize,
}

impl Rotation {
    pub fn q_full(&self) -> &DMatrix<f64> {
        &self.q_full
    }

    pub fn q1(&self) -> DMatrix<f64> {
        self.q_full.columns(0, self.d0).into_owned()
    }

    pub fn q2(&self) -> DMatrix<f64> {
        let d = self.q_full.ncols();
        self.q_full.columns(self.d0, d - self.d0).into_owned()
    }

    pub fn r_a(&self) -> &DMatrix<f64> {
        &self.r_a
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    /// Dimension of the null set, `d - d₀`.
    pub fn null_dim(&self) -> usize {
        self.q_full.ncols() - self.d0
    }

    /// `τ = Q_2 τ̃_2`.
    pub fn lift(&self, tau2: &DVector<f64>) -> VarComponents {
        VarComponents::from_vector(&(self.q2() * tau2))
    }

    /// `Q_2ᵀ τ`.
    pub fn project(&self, tau: &VarComponents) -> DVector<f64> {
        self.q2().transpose() * tau.to_vector()
    }

    /// The same rotation with the sign of selected `Q_2` columns flipped.
    pub fn with_flipped_null_columns(&self, flip: &[bool]) -> Rotation {
        let mut out = self.clone();
        for (k, &f) in flip.iter().enumerate() {
            if f {
                let c = self.d0 + k;
                let col = -out.q_full.column(c);
                out.q_full.set_column(c, &col);
            }
        }
        out
    }
}

pub fn rotation_from_contrast(contrast: &ContrastSpec) -> Result<Rotation> {
    let at = contrast.a().transpose();
    let (d, d0) = at.shape();
    let rank = numerical_rank(&at)?;
    if rank != d0 {
        return Err(Error::RankDeficient {
            what: "contrast matrix A",
            rank,
            expected: d0,
        });
    }
    let qr = decomp::householder_qr(&at)?;
    Ok(Rotation {
        q_full: qr.reflectors().columns(0, d),
        r_a: qr.r().clone(),
        d0,
    })
}

/// `τ = Q_2 τ̃_2` as a free function.
pub fn lift(rot: &Rotation, tau2: &DVector<f64>) -> VarComponents {
    rot.lift(tau2)
}

/// `R_Z D(τ) R_Zᵀ + I_m`.
pub(crate) fn inner_covariance(r_z: &DMatrix<f64>, d_diag: &DVector<f64>) -> DMatrix<f64> {
    let m = r_z.nrows();
    let mut rd = r_z.clone();
    for (c, mut col) in rd.column_iter_mut().enumerate() {
        col *= d_diag[c];
    }
    let mut c = DMatrix::identity(m, m);
    c.gemm(1.0, &rd, &r_z.transpose(), 1.0);
    c
}

pub(crate) fn factor_inner(
    r_z: &DMatrix<f64>,
    d_diag: &DVector<f64>,
) -> std::result::Result<CholFactor, Error> {
    decomp::cholesky_with_floor(&inner_covariance(r_z, d_diag), BARRIER_PIVOT_FLOOR)
        .map_err(|_| Error::OutsideParameterSpace)
}

/// Cholesky factor `L(τ)` of `R_Z D(τ) R_Zᵀ + I_m`. Fails with
/// [`Error::OutsideParameterSpace`] exactly when `Σ(τ)` is not positive
/// definite (up to [`BARRIER_PIVOT_FLOOR`]).
pub fn build_covariance_factor(
    design: &DesignMatrices,
    zqr: &QrFactor,
    tau: &VarComponents,
) -> Result<CholFactor> {
    if tau.len() != design.d() {
        return Err(Error::DimensionMismatch {
            context: "variance components",
            expected: design.d(),
            found: tau.len(),
        });
    }
    if zqr.n_cols() != design.m() || zqr.n_rows() != design.n() {
        return Err(Error::DimensionMismatch {
            context: "QR factor of Z",
            expected: design.m(),
            found: zqr.n_cols(),
        });
    }
    factor_inner(zqr.r(), &design.expand(tau))
}

/// `τ ∈ T_N`, decided by Cholesky success of the `m × m` inner matrix.
pub fn in_parameter_space(design: &DesignMatrices, zqr: &QrFactor, tau: &VarComponents) -> bool {
    build_covariance_factor(design, zqr, tau).is_ok()
}
