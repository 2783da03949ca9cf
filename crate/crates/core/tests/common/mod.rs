//! Independent dense oracles and random instances shared by the
//! integration tests. Nothing here calls the crate's factorization code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use varcomp::model::{DesignMatrices, VarComponents};

pub fn incidence(levels: &[usize], n_levels: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(levels.len(), n_levels);
    for (i, &l) in levels.iter().enumerate() {
        z[(i, l)] = 1.0;
    }
    z
}

/// Orthonormal basis of the orthogonal complement of `col(X)`, from the
/// eigenvectors of the residual projector.
pub fn residual_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let xtx = x.transpose() * x;
    let proj = DMatrix::identity(n, n) - x * xtx.try_inverse().unwrap() * x.transpose();
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<_> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

pub fn dense_sigma(design: &DesignMatrices, tau: &[f64]) -> DMatrix<f64> {
    let n = design.n();
    let mut s = DMatrix::identity(n, n);
    for (j, &t) in tau.iter().enumerate() {
        let z = design.z_block(j);
        s += &z * z.transpose() * t;
    }
    s
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `log|W| + (N-p) log(qᵀW⁻¹q)` with `W = U_XᵀΣU_X` and `q` the normalized
/// residual, for an arbitrary symmetric `Σ`.
pub fn dense_nrll_sigma(x: &DMatrix<f64>, sigma: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let u = residual_basis(x);
    let w = u.transpose() * sigma * &u;
    let mut q = u.transpose() * y;
    q /= q.norm();
    let chol = w.clone().cholesky().expect("W positive definite");
    let det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let quad = q.dot(&chol.solve(&q));
    det + (u.ncols() as f64) * quad.ln()
}

pub fn dense_nrll(design: &DesignMatrices, y: &DVector<f64>, tau: &[f64]) -> f64 {
    dense_nrll_sigma(design.x(), &dense_sigma(design, tau), y)
}

/// Covariance of `U_Xᵀ ω` for `ω ~ N(0, Σ)`.
pub fn dense_w(design: &DesignMatrices, tau: &[f64]) -> DMatrix<f64> {
    let u = residual_basis(design.x());
    u.transpose() * dense_sigma(design, tau) * &u
}

/// Random nested or crossed design with `d ≤ 3` blocks and `N ≤ 60`.
pub fn random_design(rng: &mut ChaCha8Rng) -> DesignMatrices {
    loop {
        let n = rng.random_range(15..=60);
        let d = rng.random_range(1..=3);
        let mut blocks = Vec::new();
        let mut parent: Option<Vec<usize>> = None;
        for _ in 0..d {
            let nested = parent.is_some() && rng.random_bool(0.5);
            let levels: Vec<usize>;
            let n_levels;
            if nested {
                let par = parent.clone().unwrap();
                let split = rng.random_range(2..=3);
                levels = par
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p * split + if i % 2 == 0 { 0 } else { rng.random_range(0..split) })
                    .collect();
                n_levels = par.iter().max().unwrap() * split + split;
            } else {
                n_levels = rng.random_range(2..=8);
                levels = (0..n)
                    .map(|i| if i < n_levels { i } else { rng.random_range(0..n_levels) })
                    .collect();
            }
            let (levels, n_levels) = compact(&levels, n_levels);
            blocks.push(incidence(&levels, n_levels));
            parent = Some(levels);
        }
        let m: usize = blocks.iter().map(|b| b.ncols()).sum();
        if m > n {
            continue;
        }
        let mut x = DMatrix::from_element(n, 1, 1.0);
        if rng.random_bool(0.4) {
            let cov = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            x = x.insert_column(1, 0.0);
            x.set_column(1, &cov);
        }
        if let Ok(d) = DesignMatrices::new(x, blocks) {
            return d;
        }
    }
}

fn compact(levels: &[usize], n_levels: usize) -> (Vec<usize>, usize) {
    let mut map = vec![usize::MAX; n_levels];
    let mut next = 0;
    let out = levels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect();
    (out, next)
}

/// Random `τ` with `λ_min(Σ(τ)) ≥ margin`, negative coordinates allowed.
pub fn random_tau(rng: &mut ChaCha8Rng, design: &DesignMatrices, margin: f64) -> Vec<f64> {
    loop {
        let tau: Vec<f64> = (0..design.d())
            .map(|_| {
                if rng.random_bool(0.4) {
                    -rng.random_range(0.0..0.3)
                } else {
                    rng.random_range(0.0..3.0)
                }
            })
            .collect();
        if min_eigenvalue(&dense_sigma(design, &tau)) >= margin {
            return tau;
        }
    }
}

pub fn random_response(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
}

pub fn vc(v: &[f64]) -> VarComponents {
    VarComponents::new(v.to_vec()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
