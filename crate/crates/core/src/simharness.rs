//! Monte Carlo size and power studies of the bootstrap test.
//!
//! A grid is the product of design sizes and `τ` pairs. Each cell simulates
//! `s` datasets, runs a `b`-replicate bootstrap test on each and summarizes
//! the p-values. Replicate `k` of cell `c` draws everything from seeds
//! derived from `(seed, c, k)`, so tables are identical for any worker count.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_test, Statistic, TestOptions};
use crate::designs::{
    crossed_design, gen_unbalanced_crossed, gen_unbalanced_nested, nested_design,
    simulate_response, CrossedLayout, NestedLayout, Replication, SimulationConfig, XSpec,
};
use crate::error::{Error, Result};
use crate::likelihood::DesignCache;
use crate::model::{rotation_from_contrast, Alternative, ContrastSpec, RowConstraint, VarComponents};
use crate::optimizer::NewtonOptions;
use crate::rng::{derive_seed, substream};

/// Points of the grid used by [`ks_uniform`].
pub const KS_GRID_POINTS: usize = 1000;

/// Rejection threshold for the reported rates.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignFamily {
    Nested,
    Crossed,
}

impl std::fmt::Display for DesignFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignFamily::Nested => "nested",
            DesignFamily::Crossed => "crossed",
        })
    }
}

/// `(m, n, r_or_rho)`. For nested designs the third entry is the (mean)
/// replicate count; for crossed designs it is the replicate count when
/// balanced and the copula correlation `ρ` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct SizeParams {
    pub m: usize,
    pub n: usize,
    pub r_or_rho: f64,
}

impl From<(usize, usize, f64)> for SizeParams {
    fn from((m, n, r_or_rho): (usize, usize, f64)) -> Self {
        SizeParams { m, n, r_or_rho }
    }
}

impl From<SizeParams> for (usize, usize, f64) {
    fn from(s: SizeParams) -> Self {
        (s.m, s.n, s.r_or_rho)
    }
}

fn default_contrast() -> Vec<Vec<f64>> {
    vec![vec![1.0, -1.0]]
}

fn default_alternative() -> Vec<RowConstraint> {
    vec![RowConstraint::Greater]
}

fn default_true() -> bool {
    true
}

/// A simulation manifest. Serialized as JSON with every default spelled
/// out once resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub family: DesignFamily,
    #[serde(default = "default_true")]
    pub balanced: bool,
    pub sizes: Vec<SizeParams>,
    pub taus: Vec<Vec<f64>>,
    pub s: usize,
    pub b: usize,
    /// Rows of `A`.
    #[serde(default = "default_contrast")]
    pub contrast: Vec<Vec<f64>>,
    /// One-sided cone, one entry per row of `A`.
    #[serde(default = "default_alternative")]
    pub alternative: Vec<RowConstraint>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replication: Replication,
    #[serde(default)]
    pub statistic: Statistic,
    #[serde(default)]
    pub plus_one: bool,
}

/// One cell of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub family: DesignFamily,
    pub balanced: bool,
    pub size: SizeParams,
    pub tau: Vec<f64>,
    pub replication: Replication,
}

impl GridPoint {
    fn check(&self) -> Result<()> {
        let SizeParams { m, n, r_or_rho } = self.size;
        let bad = |msg: &str| Err(Error::InvalidInput(format!("grid point {self:?}: {msg}")));
        if self.tau.len() != 2 || self.tau.iter().any(|t| !t.is_finite()) {
            return bad("tau needs two finite components");
        }
        if m == 0 || n == 0 {
            return bad("m and n must be positive");
        }
        let integral = r_or_rho >= 1.0 && r_or_rho.fract() == 0.0;
        match (self.family, self.balanced) {
            (DesignFamily::Crossed, false) if !(0.0..1.0).contains(&r_or_rho) => {
                bad("rho must lie in [0, 1)")
            }
            (DesignFamily::Crossed, false) => Ok(()),
            (DesignFamily::Nested, false) if n < 2 || !integral || r_or_rho < 2.0 => {
                bad("unbalanced nested cells need n ≥ 2 and integer r ≥ 2")
            }
            _ if !integral => bad("r must be a positive integer"),
            _ => Ok(()),
        }
    }

    /// Unbalanced crossed layouts with many more levels on one factor,
    /// where the test is known to drift from nominal size.
    pub fn known_size_distortion(&self) -> bool {
        let SizeParams { m, n, .. } = self.size;
        self.family == DesignFamily::Crossed && !self.balanced && m.max(n) >= 5 * m.min(n)
    }

    fn fixed_design(&self) -> Result<Option<Arc<DesignCache>>> {
        let SizeParams { m, n, r_or_rho } = self.size;
        let r = r_or_rho as usize;
        let design = match (self.family, self.balanced) {
            (DesignFamily::Nested, true) => nested_design(&NestedLayout::balanced(m, n, r), &XSpec::InterceptOnly)?,
            (DesignFamily::Crossed, true) => crossed_design(&CrossedLayout::balanced(m, n, r), &XSpec::InterceptOnly)?,
            _ => return Ok(None),
        };
        Ok(Some(Arc::new(DesignCache::new(design)?)))
    }

    fn random_design<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<Arc<DesignCache>> {
        let SizeParams { m, n, r_or_rho } = self.size;
        let design = match self.family {
            DesignFamily::Nested => {
                let layout = gen_unbalanced_nested(m, n, r_or_rho as usize, self.replication, rng)?;
                nested_design(&layout, &XSpec::InterceptOnly)?
            }
            DesignFamily::Crossed => {
                let layout = gen_unbalanced_crossed(m, n, r_or_rho, m * n, false, rng)?;
                crossed_design(&layout, &XSpec::InterceptOnly)?
            }
        };
        Ok(Arc::new(DesignCache::new(design)?))
    }
}

/// Settings shared by every cell of a run.
#[derive(Debug, Clone)]
pub struct CellSettings {
    pub s: usize,
    pub b: usize,
    pub contrast: ContrastSpec,
    pub test: TestOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub point: GridPoint,
    pub s: usize,
    pub b: usize,
    /// One entry per successful replicate, in replicate order.
    pub pvalues_two: Vec<f64>,
    pub pvalues_one: Vec<Option<f64>>,
    pub reject05_two: f64,
    pub reject05_one: Option<f64>,
    /// Binomial standard error of `reject05_two`.
    pub mcse: f64,
    pub ks_two: f64,
    /// Mean over replicates of the average entry of `Q₂Q₂ᵀτ̂`.
    pub mean_common_tau: f64,
    pub n_failed: usize,
    /// The first replicate error, with its replicate index.
    pub first_error: Option<String>,
}

/// `sup_t |F̂(t) − t|` over `t = k/1000`, `k = 0..=1000`.
pub fn ks_uniform(pvals: &[f64]) -> f64 {
    if pvals.is_empty() {
        return f64::NAN;
    }
    let mut sorted = pvals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s = sorted.len() as f64;
    (0..=KS_GRID_POINTS)
        .map(|k| {
            let t = k as f64 / KS_GRID_POINTS as f64;
            let below = sorted.partition_point(|&p| p <= t) as f64;
            (below / s - t).abs()
        })
        .fold(0.0, f64::max)
}

struct RepOutcome {
    p_two: f64,
    p_one: Option<f64>,
    common: f64,
}

fn run_replicate(
    point: &GridPoint,
    fixed: Option<&Arc<DesignCache>>,
    settings: &CellSettings,
    common_proj: &DMatrix<f64>,
    cell: usize,
    rep: usize,
) -> Result<RepOutcome> {
    let rep_seed = derive_seed(settings.seed, &[cell as u64, rep as u64]);
    let mut rng = substream(rep_seed, 0);
    let cache = match fixed {
        Some(c) => Arc::clone(c),
        None => point.random_design(&mut rng)?,
    };
    let tau = VarComponents::new(point.tau.clone())?;
    let y = simulate_response(&cache, &SimulationConfig::standard(cache.p(), tau), &mut rng)?;
    let res = bootstrap_test(
        &cache,
        &y,
        &settings.contrast,
        settings.b,
        derive_seed(rep_seed, &[1]),
        &settings.test,
    )?;
    Ok(RepOutcome {
        p_two: res.p_two,
        p_one: res.p_one,
        common: (common_proj * res.tau_hat().to_vector()).mean(),
    })
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

fn summarize(
    cell: usize,
    point: GridPoint,
    settings: &CellSettings,
    outcomes: Vec<Result<RepOutcome>>,
) -> CellResult {
    let mut first_error = None;
    let mut ok = Vec::with_capacity(outcomes.len());
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                first_error.get_or_insert_with(|| format!("cell {cell}, replicate {rep}: {e}"));
            }
        }
    }
    let s_ok = ok.len();
    let pvalues_two: Vec<f64> = ok.iter().map(|o| o.p_two).collect();
    let pvalues_one: Vec<Option<f64>> = ok.iter().map(|o| o.p_one).collect();
    let reject05_two = rate(pvalues_two.iter().filter(|&&p| p <= ALPHA).count(), s_ok);
    let reject05_one = pvalues_one
        .iter()
        .map(|p| p.map(|p| (p <= ALPHA) as usize))
        .sum::<Option<usize>>()
        .map(|hits| rate(hits, s_ok));
    CellResult {
        cell,
        point,
        s: settings.s,
        b: settings.b,
        mcse: (reject05_two * (1.0 - reject05_two) / s_ok as f64).sqrt(),
        ks_two: ks_uniform(&pvalues_two),
        mean_common_tau: ok.iter().map(|o| o.common).sum::<f64>() / s_ok as f64,
        reject05_two,
        reject05_one: if s_ok == 0 { None } else { reject05_one },
        pvalues_two,
        pvalues_one,
        n_failed: settings.s - s_ok,
        first_error,
    }
}

fn common_projector(contrast: &ContrastSpec) -> Result<DMatrix<f64>> {
    let q2 = rotation_from_contrast(contrast)?.q2();
    Ok(&q2 * q2.transpose())
}

/// Simulate one cell with `settings.s` outer replicates.
pub fn run_cell(point: &GridPoint, cell: usize, settings: &CellSettings) -> Result<CellResult> {
    point.check()?;
    check_settings(settings)?;
    let fixed = point.fixed_design()?;
    let proj = common_projector(&settings.contrast)?;
    let outcomes: Vec<Result<RepOutcome>> = (0..settings.s)
        .into_par_iter()
        .map(|rep| run_replicate(point, fixed.as_ref(), settings, &proj, cell, rep))
        .collect();
    Ok(summarize(cell, point.clone(), settings, outcomes))
}

fn check_settings(settings: &CellSettings) -> Result<()> {
    if settings.s == 0 || settings.b == 0 {
        return Err(Error::InvalidInput("s and b must be at least 1".into()));
    }
    if settings.contrast.d() != 2 {
        return Err(Error::InvalidInput(
            "simulated designs have two components; the contrast needs two columns".into(),
        ));
    }
    Ok(())
}

impl ExperimentGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: ExperimentGrid = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("manifest: {e}")))?;
        grid.points()?;
        grid.settings(None)?;
        Ok(grid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Cells in size-major order.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.sizes.is_empty() || self.taus.is_empty() {
            return Err(Error::InvalidInput("manifest needs at least one size and one tau".into()));
        }
        let points: Vec<GridPoint> = self
            .sizes
            .iter()
            .flat_map(|&size| {
                self.taus.iter().map(move |tau| GridPoint {
                    family: self.family,
                    balanced: self.balanced,
                    size,
                    tau: tau.clone(),
                    replication: self.replication,
                })
            })
            .collect();
        points.iter().try_for_each(GridPoint::check)?;
        Ok(points)
    }

    pub fn contrast_spec(&self) -> Result<ContrastSpec> {
        let rows = self.contrast.len();
        let cols = self.contrast.first().map_or(0, Vec::len);
        if rows == 0 || self.contrast.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("contrast rows must be non-empty and equally long".into()));
        }
        let a = DMatrix::from_fn(rows, cols, |i, j| self.contrast[i][j]);
        ContrastSpec::new(a, Alternative::OneSided(self.alternative.clone()))
    }

    /// Settings for every cell; `workers` caps the bootstrap pool.
    pub fn settings(&self, newton: Option<NewtonOptions>) -> Result<CellSettings> {
        let settings = CellSettings {
            s: self.s,
            b: self.b,
            contrast: self.contrast_spec()?,
            test: TestOptions {
                statistic: self.statistic,
                plus_one: self.plus_one,
                workers: None,
                newton: newton.unwrap_or_default(),
            },
            seed: self.seed,
        };
        check_settings(&settings)?;
        Ok(settings)
    }
}

/// Run every cell of `grid`, optionally in a pool of `workers` threads, and
/// write the CSV table to `sink`. Cells whose replicates fail are kept with
/// their failure count.
pub fn power_table(
    grid: &ExperimentGrid,
    workers: Option<usize>,
    sink: Option<&mut dyn Write>,
) -> Result<Vec<CellResult>> {
    let points = grid.points()?;
    let settings = grid.settings(None)?;
    let run = || -> Result<Vec<CellResult>> {
        let fixed = points
            .iter()
            .map(GridPoint::fixed_design)
            .collect::<Result<Vec<_>>>()?;
        let proj = common_projector(&settings.contrast)?;
        let jobs: Vec<(usize, usize)> = (0..points.len())
            .flat_map(|c| (0..settings.s).map(move |k| (c, k)))
            .collect();
        let mut outcomes: Vec<Result<RepOutcome>> = jobs
            .par_iter()
            .map(|&(c, k)| run_replicate(&points[c], fixed[c].as_ref(), &settings, &proj, c, k))
            .collect();
        let mut results = Vec::with_capacity(points.len());
        for (c, point) in points.iter().enumerate().rev() {
            let tail = outcomes.split_off(c * settings.s);
            results.push(summarize(c, point.clone(), &settings, tail));
        }
        results.reverse();
        Ok(results)
    };
    let results = match workers {
        None => run()?,
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run)?,
    };
    if let Some(sink) = sink {
        write_csv(&results, sink)?;
    }
    Ok(results)
}

#[derive(Serialize)]
struct CsvRow {
    family: String,
    m: usize,
    n: usize,
    r_or_rho: f64,
    tau1: f64,
    tau2: f64,
    s: usize,
    b: usize,
    reject05_two: f64,
    reject05_one: Option<f64>,
    mcse: f64,
    ks_two: f64,
    mean_common_tau: f64,
    n_failed: usize,
}

/// Column order of the simulation CSV.
pub const CSV_COLUMNS: [&str; 14] = [
    "family",
    "m",
    "n",
    "r_or_rho",
    "tau1",
    "tau2",
    "s",
    "b",
    "reject05_two",
    "reject05_one",
    "mcse",
    "ks_two",
    "mean_common_tau",
    "n_failed",
];

pub fn write_csv(results: &[CellResult], sink: &mut dyn Write) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(sink);
    for r in results {
        w.serialize(CsvRow {
            family: r.point.family.to_string(),
            m: r.point.size.m,
            n: r.point.size.n,
            r_or_rho: r.point.size.r_or_rho,
            tau1: r.point.tau[0],
            tau2: r.point.tau[1],
            s: r.s,
            b: r.b,
            reject05_two: r.reject05_two,
            reject05_one: r.reject05_one,
            mcse: r.mcse,
            ks_two: r.ks_two,
            mean_common_tau: r.mean_common_tau,
            n_failed: r.n_failed,
        })
        .map_err(io)?;
    }
    if results.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("writing CSV: {e}")))?;
    Ok(())
}
