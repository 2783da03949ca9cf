//! Nested and crossed layouts, their design matrices, the imbalance
//! generators of the simulation study and response simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::likelihood::DesignCache;
use crate::model::{DesignMatrices, VarComponents};

/// Attempts made by [`gen_unbalanced_crossed`] before giving up on a sample
/// that leaves a factor level empty.
pub const CROSSED_MAX_RETRIES: usize = 100;

/// Blocks, plots within blocks, and replicates within plots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedLayout {
    pub m: usize,
    /// `n_i`, plots in block `i`.
    pub group_sizes: Vec<usize>,
    /// `r_ij`, observations in plot `j` of block `i`.
    pub rep_counts: Vec<Vec<usize>>,
}

impl NestedLayout {
    pub fn balanced(m: usize, n: usize, r: usize) -> Self {
        NestedLayout {
            m,
            group_sizes: vec![n; m],
            rep_counts: vec![vec![r; n]; m],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.group_sizes.len() != self.m || self.rep_counts.len() != self.m {
            return Err(Error::InvalidDesign(
                "nested layout needs m ≥ 1 blocks with sizes and replicate counts for each".into(),
            ));
        }
        for (i, (&ni, reps)) in self.group_sizes.iter().zip(&self.rep_counts).enumerate() {
            if ni == 0 || reps.len() != ni {
                return Err(Error::InvalidDesign(format!(
                    "block {i} must list one replicate count per plot"
                )));
            }
            if let Some(j) = reps.iter().position(|&r| r == 0) {
                return Err(Error::InvalidDesign(format!("plot {j} of block {i} is empty")));
            }
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.rep_counts.iter().flatten().sum()
    }

    pub fn n_plots(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Block and plot index of every observation, in row order.
    pub fn labels(&self) -> (Vec<usize>, Vec<usize>) {
        let mut block = Vec::with_capacity(self.n_obs());
        let mut plot = Vec::with_capacity(self.n_obs());
        let mut next_plot = 0;
        for (i, reps) in self.rep_counts.iter().enumerate() {
            for &r in reps {
                block.extend(std::iter::repeat_n(i, r));
                plot.extend(std::iter::repeat_n(next_plot, r));
                next_plot += 1;
            }
        }
        (block, plot)
    }
}

/// Two crossed factors with `m` and `n` levels; one entry per observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossedLayout {
    pub m: usize,
    pub n: usize,
    /// Zero-based `(i, j)` level pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl CrossedLayout {
    /// Full factorial with `r` observations per cell.
    pub fn balanced(m: usize, n: usize, r: usize) -> Self {
        let mut pairs = Vec::with_capacity(m * n * r);
        for i in 0..m {
            for j in 0..n {
                pairs.extend(std::iter::repeat_n((i, j), r));
            }
        }
        CrossedLayout { m, n, pairs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.pairs.is_empty() {
            return Err(Error::InvalidDesign("crossed layout is empty".into()));
        }
        if self.pairs.iter().any(|&(i, j)| i >= self.m || j >= self.n) {
            return Err(Error::InvalidDesign("crossed layout pair out of range".into()));
        }
        let (rows, cols) = self.occupancy();
        if let Some(i) = rows.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDesign(format!("level {i} of the first factor is empty")));
        }
        if let Some(j) = cols.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDesign(format!("level {j} of the second factor is empty")));
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.pairs.len()
    }

    /// Observation counts per level of each factor.
    pub fn occupancy(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = vec![0; self.m];
        let mut cols = vec![0; self.n];
        for &(i, j) in &self.pairs {
            if i < self.m && j < self.n {
                rows[i] += 1;
                cols[j] += 1;
            }
        }
        (rows, cols)
    }
}

/// Fixed-effect specification for the generated designs.
#[derive(Debug, Clone, Default)]
pub enum XSpec {
    #[default]
    InterceptOnly,
    Supplied(DMatrix<f64>),
}

impl XSpec {
    fn build(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            XSpec::InterceptOnly => Ok(DMatrix::from_element(n, 1, 1.0)),
            XSpec::Supplied(x) if x.nrows() == n => Ok(x.clone()),
            XSpec::Supplied(x) => Err(Error::DimensionMismatch {
                context: "supplied X rows",
                expected: n,
                found: x.nrows(),
            }),
        }
    }
}

/// Indicator matrix with one column per level.
pub fn indicator_matrix(labels: &[usize], levels: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(labels.len(), levels);
    for (row, &l) in labels.iter().enumerate() {
        z[(row, l)] = 1.0;
    }
    z
}

/// `Z_1` = block indicators, `Z_2` = plot-within-block indicators.
pub fn nested_design(layout: &NestedLayout, x: &XSpec) -> Result<DesignMatrices> {
    layout.validate()?;
    let (block, plot) = layout.labels();
    DesignMatrices::new(
        x.build(block.len())?,
        vec![
            indicator_matrix(&block, layout.m),
            indicator_matrix(&plot, layout.n_plots()),
        ],
    )
}

/// `Z_1`, `Z_2` = indicators of the two crossed factors.
pub fn crossed_design(layout: &CrossedLayout, x: &XSpec) -> Result<DesignMatrices> {
    layout.validate()?;
    let first: Vec<usize> = layout.pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = layout.pairs.iter().map(|p| p.1).collect();
    DesignMatrices::new(
        x.build(first.len())?,
        vec![
            indicator_matrix(&first, layout.m),
            indicator_matrix(&second, layout.n),
        ],
    )
}

/// How replicate counts vary in [`gen_unbalanced_nested`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replication {
    /// One draw of `r_ij` per plot.
    #[default]
    PerPlot,
    /// One draw per block, shared by its plots.
    PerBlock,
}

/// `n_i ~ U{2, …, 2n−2}` and `r ~ U{2, …, 2r−2}`, so both have minimum 2
/// and means `n` and `r`.
pub fn gen_unbalanced_nested<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    replication: Replication,
    rng: &mut R,
) -> Result<NestedLayout> {
    if m == 0 || n < 2 || r < 2 {
        return Err(Error::InvalidInput(
            "unbalanced nested generator needs m ≥ 1, n ≥ 2 and r ≥ 2".into(),
        ));
    }
    let mut group_sizes = Vec::with_capacity(m);
    let mut rep_counts = Vec::with_capacity(m);
    for _ in 0..m {
        let ni = rng.random_range(2..=2 * n - 2);
        let reps = match replication {
            Replication::PerPlot => (0..ni).map(|_| rng.random_range(2..=2 * r - 2)).collect(),
            Replication::PerBlock => vec![rng.random_range(2..=2 * r - 2); ni],
        };
        group_sizes.push(ni);
        rep_counts.push(reps);
    }
    Ok(NestedLayout {
        m,
        group_sizes,
        rep_counts,
    })
}

/// Gaussian-copula pairs: a bivariate normal with correlation `rho` mapped
/// through `Φ` and the discrete-uniform quantile on each margin. With
/// `balanced` set, returns the full factorial of size `m·n` instead
/// (`n_total` must then equal `m·n`).
pub fn gen_unbalanced_crossed<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    rho: f64,
    n_total: usize,
    balanced: bool,
    rng: &mut R,
) -> Result<CrossedLayout> {
    if m == 0 || n == 0 || n_total == 0 || !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(
            "crossed generator needs m, n, n_total ≥ 1 and 0 ≤ rho < 1".into(),
        ));
    }
    if balanced {
        if n_total != m * n {
            return Err(Error::InvalidInput(format!(
                "balanced crossed layout needs n_total = m·n = {}",
                m * n
            )));
        }
        return Ok(CrossedLayout::balanced(m, n, 1));
    }
    let phi = Normal::standard();
    let level = |u: f64, k: usize| ((u * k as f64) as usize).min(k - 1);
    let tail = (1.0 - rho * rho).sqrt();
    for _ in 0..CROSSED_MAX_RETRIES {
        let pairs = (0..n_total)
            .map(|_| {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let w = rho * z1 + tail * z2;
                (level(phi.cdf(z1), m), level(phi.cdf(w), n))
            })
            .collect();
        let layout = CrossedLayout { m, n, pairs };
        if layout.validate().is_ok() {
            return Ok(layout);
        }
    }
    Err(Error::InvalidDesign(format!(
        "no crossed sample with every level present after {CROSSED_MAX_RETRIES} attempts"
    )))
}

/// Parameters of `y ~ N(Xβ, σ² Σ(τ))`.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub tau: VarComponents,
}

impl SimulationConfig {
    /// `β = 0`, `σ² = 1`.
    pub fn standard(p: usize, tau: VarComponents) -> Self {
        SimulationConfig {
            beta: DVector::zeros(p),
            sigma2: 1.0,
            tau,
        }
    }
}

/// `y = Xβ + σ P_Z (L(τ) ω_1 ; ω_2)`. Valid for any `τ` in the parameter
/// space, including negative components.
pub fn simulate_response<R: Rng + ?Sized>(
    cache: &DesignCache,
    config: &SimulationConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(config.sigma2 > 0.0) {
        return Err(Error::InvalidInput("sigma2 must be positive".into()));
    }
    let x = cache.design().x();
    if config.beta.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "beta length",
            expected: x.ncols(),
            found: config.beta.len(),
        });
    }
    let l = cache.inner_factor(&config.tau)?;
    let omega = DVector::from_fn(cache.n(), |_, _| rng.sample(StandardNormal));
    let noise = cache.correlate(&l, omega)?;
    Ok(x * &config.beta + noise * config.sigma2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_nesting_gives_identities() {
        let layout = NestedLayout::balanced(2, 1, 1);
        let d = nested_design(&layout, &XSpec::InterceptOnly);
        // N = 2 with p = 1: valid, Z₁ = Z₂ = I₂.
        let d = d.unwrap();
        assert_eq!(d.z_block(0), DMatrix::identity(2, 2));
        assert_eq!(d.z_block(1), DMatrix::identity(2, 2));
    }

    #[test]
    fn small_nested_layout() {
        let d = nested_design(&NestedLayout::balanced(2, 2, 2), &XSpec::InterceptOnly).unwrap();
        assert_eq!(d.n(), 8);
        let z1 = d.z_block(0);
        assert_eq!(z1.shape(), (8, 2));
        for i in 0..8 {
            assert_eq!(z1[(i, 0)], if i < 4 { 1.0 } else { 0.0 });
        }
        assert_eq!(d.z_block(1).shape(), (8, 4));
    }

    #[test]
    fn nested_aggregation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = gen_unbalanced_nested(5, 3, 3, Replication::PerPlot, &mut rng).unwrap();
        let d = nested_design(&layout, &XSpec::InterceptOnly).unwrap();
        let mut g = DMatrix::zeros(layout.n_plots(), layout.m);
        let mut k = 0;
        for (i, &ni) in layout.group_sizes.iter().enumerate() {
            for _ in 0..ni {
                g[(k, i)] = 1.0;
                k += 1;
            }
        }
        assert_eq!(d.z_block(1) * g, d.z_block(0));
        for j in 0..2 {
            let z = d.z_block(j);
            assert!(z.row_iter().all(|r| r.sum() == 1.0));
        }
        let plot_sizes: Vec<f64> = layout.rep_counts.iter().flatten().map(|&r| r as f64).collect();
        let col_sums: Vec<f64> = d.z_block(1).column_iter().map(|c| c.sum()).collect();
        assert_eq!(col_sums, plot_sizes);
    }

    #[test]
    fn empty_plot_is_rejected() {
        let layout = NestedLayout {
            m: 1,
            group_sizes: vec![2],
            rep_counts: vec![vec![2, 0]],
        };
        assert!(nested_design(&layout, &XSpec::InterceptOnly).is_err());
    }

    #[test]
    fn full_factorial_crossed() {
        let d = crossed_design(&CrossedLayout::balanced(2, 2, 1), &XSpec::InterceptOnly).unwrap();
        assert_eq!(d.n(), 4);
        for j in 0..2 {
            let z = d.z_block(j);
            assert!(z.column_iter().all(|c| c.sum() == 2.0));
            assert!(z.row_iter().all(|r| r.sum() == 1.0));
        }
    }

    #[test]
    fn crossed_with_missing_cell_and_missing_level() {
        let ok = CrossedLayout {
            m: 2,
            n: 2,
            pairs: vec![(0, 0), (1, 0), (1, 1), (1, 1)],
        };
        let d = crossed_design(&ok, &XSpec::InterceptOnly).unwrap();
        let sums: Vec<f64> = d.z_block(0).column_iter().map(|c| c.sum()).collect();
        assert_eq!(sums, vec![1.0, 3.0]);
        let bad = CrossedLayout {
            m: 3,
            n: 2,
            pairs: vec![(0, 0), (1, 1), (1, 0)],
        };
        assert!(crossed_design(&bad, &XSpec::InterceptOnly).is_err());
    }

    #[test]
    fn unbalanced_nested_support_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let two = gen_unbalanced_nested(50, 2, 2, Replication::PerPlot, &mut rng).unwrap();
        assert!(two.group_sizes.iter().all(|&n| n == 2));
        assert!(two.rep_counts.iter().flatten().all(|&r| r == 2));

        let big = gen_unbalanced_nested(1000, 5, 3, Replication::PerPlot, &mut rng).unwrap();
        assert!(big.group_sizes.iter().all(|&n| (2..=8).contains(&n)));
        let mean = big.group_sizes.iter().sum::<usize>() as f64 / 1000.0;
        // Var of U{2..8} is (7² − 1)/12 = 4.
        assert!((mean - 5.0).abs() <= 3.0 * (4.0f64 / 1000.0).sqrt());

        let per_block = gen_unbalanced_nested(20, 4, 4, Replication::PerBlock, &mut rng).unwrap();
        assert!(per_block
            .rep_counts
            .iter()
            .all(|reps| reps.iter().all(|&r| r == reps[0])));
    }

    #[test]
    fn crossed_occupancy_and_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, total) = (10, 20000);
        let layout = gen_unbalanced_crossed(m, 8, 0.0, total, false, &mut rng).unwrap();
        let (rows, _) = layout.occupancy();
        let p = 1.0 / m as f64;
        let se = (total as f64 * p * (1.0 - p)).sqrt();
        assert!(rows.iter().all(|&c| (c as f64 - total as f64 * p).abs() <= 3.5 * se));

        let layout = gen_unbalanced_crossed(20, 20, 0.9, 5000, false, &mut rng).unwrap();
        let xs: Vec<f64> = layout.pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = layout.pairs.iter().map(|p| p.1 as f64).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 5000.0, ys.iter().sum::<f64>() / 5000.0);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        // Rank correlation of a Gaussian copula: (6/π) asin(ρ/2) ≈ 0.89.
        assert!(cov / (vx * vy).sqrt() > 0.8);
    }

    #[test]
    fn balanced_crossed_bypasses_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = gen_unbalanced_crossed(3, 4, 0.5, 12, true, &mut rng).unwrap();
        assert_eq!(layout, CrossedLayout::balanced(3, 4, 1));
        assert!(gen_unbalanced_crossed(3, 4, 0.5, 11, true, &mut rng).is_err());
    }

    #[test]
    fn crossed_retry_gives_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(gen_unbalanced_crossed(50, 50, 0.0, 10, false, &mut rng).is_err());
    }

    #[test]
    fn layouts_round_trip_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nested = gen_unbalanced_nested(4, 3, 3, Replication::PerPlot, &mut rng).unwrap();
        let s = serde_json::to_string(&nested).unwrap();
        assert_eq!(serde_json::from_str::<NestedLayout>(&s).unwrap(), nested);
        let crossed = gen_unbalanced_crossed(4, 3, 0.3, 30, false, &mut rng).unwrap();
        let s = serde_json::to_string(&crossed).unwrap();
        assert_eq!(serde_json::from_str::<CrossedLayout>(&s).unwrap(), crossed);
    }

    #[test]
    fn zero_tau_response_is_shifted_white_noise() {
        let d = nested_design(&NestedLayout::balanced(3, 2, 2), &XSpec::InterceptOnly).unwrap();
        let cache = DesignCache::new(d).unwrap();
        let config = SimulationConfig {
            beta: DVector::from_element(1, 4.0),
            sigma2: 1.0,
            tau: VarComponents::zeros(2),
        };
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let y = simulate_response(&cache, &config, &mut a).unwrap();
        let omega = DVector::from_fn(12, |_, _| b.sample::<f64, _>(StandardNormal));
        let expected = cache.z_reflectors().apply_q(&omega).unwrap().add_scalar(4.0);
        assert!((y - expected).amax() < 1e-12);
    }
}
