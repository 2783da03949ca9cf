//! Dense factorization kernel.
//!
//! Householder QR with the orthogonal factor kept as a product of
//! reflectors, Cholesky with an explicit failure value, triangular solves
//! and a Jacobi eigensolver for the small Hessians of the optimizer.
//!
//! Everything here works on column-major [`DMatrix`] storage. Callers only
//! see the factor types and their `apply`/`solve` methods, so a sparse
//! backend can replace these routines without touching the likelihood code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A sequence of Householder reflectors `H_j = I - tau_j v_j v_jᵀ`, where
/// `v_j` is zero above row `j` and has an implicit unit entry at row `j`.
///
/// The orthogonal matrix they represent is `P = H_0 H_1 … H_{k-1}`.
#[derive(Debug, Clone)]
pub struct Reflectors {
    /// Column `j` holds `v_j` strictly below the diagonal.
    v: DMatrix<f64>,
    tau: Vec<f64>,
}

impl Reflectors {
    pub fn n_rows(&self) -> usize {
        self.v.nrows()
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    fn reflect(&self, j: usize, x: &mut [f64]) {
        householder_apply(&self.v.column(j).as_slice()[j..], self.tau[j], &mut x[j..]);
    }

    /// `x ← Pᵀ x` on a raw column.
    pub fn apply_qt_slice(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_rows());
        for j in 0..self.len() {
            self.reflect(j, x);
        }
    }

    /// `x ← P x` on a raw column.
    pub fn apply_q_slice(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_rows());
        for j in (0..self.len()).rev() {
            self.reflect(j, x);
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.n_rows() {
            return Err(Error::DimensionMismatch {
                context: "orthogonal factor application",
                expected: self.n_rows(),
                found: n,
            });
        }
        Ok(())
    }

    pub fn apply_qt(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v.len())?;
        let mut out = v.clone();
        self.apply_qt_slice(out.as_mut_slice());
        Ok(out)
    }

    pub fn apply_q(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v.len())?;
        let mut out = v.clone();
        self.apply_q_slice(out.as_mut_slice());
        Ok(out)
    }

    /// `Pᵀ M`, column by column.
    pub fn apply_qt_mat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(m.nrows())?;
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            self.apply_qt_slice(col.as_mut_slice());
        }
        Ok(out)
    }

    /// `P M`, column by column.
    pub fn apply_q_mat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(m.nrows())?;
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            self.apply_q_slice(col.as_mut_slice());
        }
        Ok(out)
    }

    /// Columns `start..start + count` of `P`, formed explicitly.
    pub fn columns(&self, start: usize, count: usize) -> DMatrix<f64> {
        let n = self.n_rows();
        let mut out = DMatrix::zeros(n, count);
        for (c, mut col) in out.column_iter_mut().enumerate() {
            col[start + c] = 1.0;
            self.apply_q_slice(col.as_mut_slice());
        }
        out
    }
}

/// Turn `x` into a reflector in place. On return `x[0]` holds `beta`
/// (the new diagonal entry) and `x[1..]` holds the tail of `v`.
/// Returns `tau`; zero means the identity was used.
fn make_reflector(x: &mut [f64]) -> f64 {
    let x0 = x[0];
    let tail_sq: f64 = x[1..].iter().map(|t| t * t).sum();
    if tail_sq == 0.0 {
        return 0.0;
    }
    let norm = (x0 * x0 + tail_sq).sqrt();
    let beta = if x0 >= 0.0 { -norm } else { norm };
    let scale = 1.0 / (x0 - beta);
    for t in x[1..].iter_mut() {
        *t *= scale;
    }
    x[0] = beta;
    (beta - x0) / beta
}

/// `x ← (I - tau v vᵀ) x`, with `v[0]` taken to be 1.
#[inline]
fn householder_apply(v: &[f64], tau: f64, x: &mut [f64]) {
    if tau == 0.0 {
        return;
    }
    let mut s = x[0];
    for (vi, xi) in v[1..].iter().zip(&x[1..]) {
        s += vi * xi;
    }
    s *= tau;
    x[0] -= s;
    for (vi, xi) in v[1..].iter().zip(x[1..].iter_mut()) {
        *xi -= s * vi;
    }
}

/// Apply the reflector stored in column `j` to column `c > j` of the same
/// column-major buffer.
fn reflect_column(data: &mut [f64], n: usize, j: usize, tau: f64, c: usize) {
    debug_assert!(c > j);
    let (left, right) = data.split_at_mut(c * n);
    householder_apply(&left[j * n + j..(j + 1) * n], tau, &mut right[j..n]);
}

/// Householder QR of an `N × k` matrix, `M = P (Rᵀ, 0ᵀ)ᵀ`.
#[derive(Debug, Clone)]
pub struct QrFactor {
    reflectors: Reflectors,
    r: DMatrix<f64>,
}

impl QrFactor {
    pub fn n_rows(&self) -> usize {
        self.reflectors.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.r.ncols()
    }

    /// The `k × k` upper-triangular factor.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn reflectors(&self) -> &Reflectors {
        &self.reflectors
    }

    pub fn apply_qt(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.reflectors.apply_qt(v)
    }

    pub fn apply_q(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.reflectors.apply_q(v)
    }

    /// The leading `k` columns of `P` (the thin `Q`).
    pub fn thin_q(&self) -> DMatrix<f64> {
        self.reflectors.columns(0, self.n_cols())
    }
}

/// Unpivoted Householder QR. The reflector sign is chosen to avoid
/// cancellation, so diagonal entries of `R` may be negative. Rank-deficient
/// input is fine: the factorization still holds, `R` just has (near) zero
/// diagonal entries.
pub fn householder_qr(m: &DMatrix<f64>) -> Result<QrFactor> {
    let (n, k) = m.shape();
    if n < k {
        return Err(Error::DimensionMismatch {
            context: "householder_qr (rows must be at least columns)",
            expected: k,
            found: n,
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("householder_qr input"));
    }
    let mut work = m.clone();
    let mut tau = Vec::with_capacity(k);
    {
        let data = work.as_mut_slice();
        for j in 0..k {
            let t = make_reflector(&mut data[j * n + j..(j + 1) * n]);
            if t != 0.0 {
                for c in j + 1..k {
                    reflect_column(data, n, j, t, c);
                }
            }
            tau.push(t);
        }
    }
    let r = DMatrix::from_fn(k, k, |i, j| if i <= j { work[(i, j)] } else { 0.0 });
    for j in 0..k {
        for i in 0..=j.min(n.saturating_sub(1)) {
            work[(i, j)] = 0.0;
        }
    }
    Ok(QrFactor {
        reflectors: Reflectors { v: work, tau },
        r,
    })
}

/// QR that skips numerically dependent columns.
///
/// A column whose remaining part has norm at most
/// `N · ε · max_j ‖M_{:,j}‖₂` gets no reflector, so the first `rank`
/// columns of `P` span the column space of `M` and the remaining
/// `N - rank` span its orthogonal complement. Columns are processed in
/// order, so for any prefix of columns the leading `rank_prefix(c)` columns
/// of `P` span that prefix.
#[derive(Debug, Clone)]
pub struct SkippingQr {
    reflectors: Reflectors,
    /// `Pᵀ M`; rows at and below `rank` are rounding noise.
    transformed: DMatrix<f64>,
    /// Rank of `M[:, ..=c]` for every column `c`.
    prefix_rank: Vec<usize>,
}

impl SkippingQr {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let (n, k) = m.shape();
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("skipping QR input"));
        }
        let max_norm = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let tol = n as f64 * f64::EPSILON * max_norm;

        let mut work = m.clone();
        let mut v = DMatrix::zeros(n, k.min(n));
        let mut tau = Vec::new();
        let mut prefix_rank = Vec::with_capacity(k);
        let mut row = 0;
        for c in 0..k {
            if row < n {
                let tail_norm = work.column(c).rows(row, n - row).norm();
                if tail_norm > tol {
                    let t = make_reflector(&mut work.column_mut(c).as_mut_slice()[row..]);
                    for i in row + 1..n {
                        v[(i, row)] = work[(i, c)];
                        work[(i, c)] = 0.0;
                    }
                    let vcol = &v.as_slice()[row * n + row..(row + 1) * n];
                    for cc in c + 1..k {
                        householder_apply(vcol, t, &mut work.column_mut(cc).as_mut_slice()[row..]);
                    }
                    tau.push(t);
                    row += 1;
                }
            }
            prefix_rank.push(row);
        }
        let rank = row;
        let v = v.columns(0, rank).into_owned();
        Ok(SkippingQr {
            reflectors: Reflectors { v, tau },
            transformed: work,
            prefix_rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.prefix_rank.last().copied().unwrap_or(0)
    }

    /// Rank of the first `cols` columns.
    pub fn rank_of_prefix(&self, cols: usize) -> usize {
        if cols == 0 {
            0
        } else {
            self.prefix_rank[cols - 1]
        }
    }

    pub fn reflectors(&self) -> &Reflectors {
        &self.reflectors
    }

    /// `Pᵀ M`.
    pub fn transformed(&self) -> &DMatrix<f64> {
        &self.transformed
    }
}

/// Orthonormal basis for the orthogonal complement of the column space of
/// `m`, as an `N × (N - rank)` matrix.
pub fn kernel_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = SkippingQr::new(m)?;
    let rank = qr.rank();
    Ok(qr.reflectors.columns(rank, m.nrows() - rank))
}

/// Pivot failure reported by [`cholesky`].
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("not positive definite: pivot {index} is {pivot:e}")]
pub struct NotPositiveDefinite {
    pub index: usize,
    pub pivot: f64,
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = S`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
}

impl CholFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `log |L Lᵀ|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// `L⁻¹ b` for a vector.
    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        solve_in_place(&self.lower, Triangle::Lower, false, x.as_mut_slice())
            .expect("Cholesky factor has a positive diagonal");
        x
    }

    /// `L⁻ᵀ b` for a vector.
    pub fn solve_lower_t_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        solve_in_place(&self.lower, Triangle::Lower, true, x.as_mut_slice())
            .expect("Cholesky factor has a positive diagonal");
        x
    }

    /// `L⁻¹ B` for a matrix.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_in_place(&self.lower, Triangle::Lower, false, x.as_mut_slice())
            .expect("Cholesky factor has a positive diagonal");
        x
    }

    /// `S⁻¹ b = L⁻ᵀ L⁻¹ b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        solve_in_place(&self.lower, Triangle::Lower, false, x.as_mut_slice())
            .expect("Cholesky factor has a positive diagonal");
        solve_in_place(&self.lower, Triangle::Lower, true, x.as_mut_slice())
            .expect("Cholesky factor has a positive diagonal");
        x
    }
}

/// Cholesky factorization using the lower triangle of `s`. Fails exactly
/// when a pivot `≤ 0` (or NaN) is met.
pub fn cholesky(s: &DMatrix<f64>) -> std::result::Result<CholFactor, NotPositiveDefinite> {
    cholesky_with_floor(s, 0.0)
}

/// As [`cholesky`], but any pivot `≤ floor` counts as a failure.
pub fn cholesky_with_floor(
    s: &DMatrix<f64>,
    floor: f64,
) -> std::result::Result<CholFactor, NotPositiveDefinite> {
    let n = s.nrows();
    assert_eq!(n, s.ncols(), "cholesky needs a square matrix");
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col[j..].copy_from_slice(&s.column(j).as_slice()[j..]);
        {
            let ld = l.as_slice();
            for k in 0..j {
                let ljk = ld[k * n + j];
                if ljk != 0.0 {
                    let lk = &ld[k * n + j..(k + 1) * n];
                    for (c, &x) in col[j..].iter_mut().zip(lk) {
                        *c -= ljk * x;
                    }
                }
            }
        }
        let pivot = col[j];
        if !(pivot > floor) {
            return Err(NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        let lj = &mut l.column_mut(j);
        let lj = lj.as_mut_slice();
        lj[j] = d;
        let inv = 1.0 / d;
        for i in j + 1..n {
            lj[i] = col[i] * inv;
        }
    }
    Ok(CholFactor { lower: l })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Triangle {
    Lower,
    Upper,
}

/// Solve `T X = B` (or `Tᵀ X = B` when `transposed`) where `B` is given as
/// column-major data with `T.nrows()` rows. Only the named triangle of `t`
/// is read.
pub fn solve_in_place(
    t: &DMatrix<f64>,
    uplo: Triangle,
    transposed: bool,
    b: &mut [f64],
) -> Result<()> {
    let n = t.nrows();
    if t.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_triangular (square matrix)",
            expected: n,
            found: t.ncols(),
        });
    }
    if n == 0 {
        return Ok(());
    }
    if b.len() % n != 0 {
        return Err(Error::DimensionMismatch {
            context: "solve_triangular right-hand side",
            expected: n,
            found: b.len(),
        });
    }
    if let Some(index) = (0..n).find(|&i| t[(i, i)] == 0.0) {
        return Err(Error::SingularTriangular { index });
    }
    let td = t.as_slice();
    for x in b.chunks_mut(n) {
        match (uplo, transposed) {
            (Triangle::Lower, false) => {
                for j in 0..n {
                    let xj = x[j] / td[j * n + j];
                    x[j] = xj;
                    if xj != 0.0 {
                        let col = &td[j * n + j + 1..(j + 1) * n];
                        for (xi, &lij) in x[j + 1..].iter_mut().zip(col) {
                            *xi -= xj * lij;
                        }
                    }
                }
            }
            (Triangle::Lower, true) => {
                for j in (0..n).rev() {
                    let col = &td[j * n + j + 1..(j + 1) * n];
                    let dot: f64 = col.iter().zip(&x[j + 1..]).map(|(a, b)| a * b).sum();
                    x[j] = (x[j] - dot) / td[j * n + j];
                }
            }
            (Triangle::Upper, false) => {
                for j in (0..n).rev() {
                    let xj = x[j] / td[j * n + j];
                    x[j] = xj;
                    if xj != 0.0 {
                        let col = &td[j * n..j * n + j];
                        for (xi, &uij) in x[..j].iter_mut().zip(col) {
                            *xi -= xj * uij;
                        }
                    }
                }
            }
            (Triangle::Upper, true) => {
                for j in 0..n {
                    let col = &td[j * n..j * n + j];
                    let dot: f64 = col.iter().zip(&x[..j]).map(|(a, b)| a * b).sum();
                    x[j] = (x[j] - dot) / td[j * n + j];
                }
            }
        }
    }
    Ok(())
}

/// `T⁻¹ B` (or `T⁻ᵀ B`) for a matrix right-hand side.
pub fn solve_triangular(
    t: &DMatrix<f64>,
    uplo: Triangle,
    b: &DMatrix<f64>,
    transposed: bool,
) -> Result<DMatrix<f64>> {
    if b.nrows() != t.nrows() {
        return Err(Error::DimensionMismatch {
            context: "solve_triangular right-hand side",
            expected: t.nrows(),
            found: b.nrows(),
        });
    }
    let mut x = b.clone();
    solve_in_place(t, uplo, transposed, x.as_mut_slice())?;
    Ok(x)
}

/// `T⁻¹ b` (or `T⁻ᵀ b`) for a vector right-hand side.
pub fn solve_triangular_vec(
    t: &DMatrix<f64>,
    uplo: Triangle,
    b: &DVector<f64>,
    transposed: bool,
) -> Result<DVector<f64>> {
    if b.len() != t.nrows() {
        return Err(Error::DimensionMismatch {
            context: "solve_triangular right-hand side",
            expected: t.nrows(),
            found: b.len(),
        });
    }
    let mut x = b.clone();
    solve_in_place(t, uplo, transposed, x.as_mut_slice())?;
    Ok(x)
}

/// Eigendecomposition `H = B Λ Bᵀ` of a small symmetric matrix, eigenvalues
/// in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigensolver. Reads the full matrix and symmetrizes it first.
pub fn sym_eig(h: &DMatrix<f64>) -> Result<SymEig> {
    let d = h.nrows();
    if h.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "sym_eig (square matrix)",
            expected: d,
            found: h.ncols(),
        });
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let mut a = (h + h.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(d, d);
    let scale = a.norm();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_iterator(d, order.iter().map(|&i| a[(i, i)]));
    let vectors = DMatrix::from_fn(d, d, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}
