//! The `varcomp` command line: `fit`, `test` and `simulate`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 non-convergence, 4 singular or
//! confounded design, 5 too many failed bootstrap replicates.

pub mod report;
pub mod table;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::bootstrap::{bootstrap_test, Statistic, TestOptions};
use crate::error::{Error, Result};
use crate::likelihood::{DesignCache, LikelihoodCache};
use crate::model::{Alternative, ContrastSpec, RowConstraint};
use crate::optimizer::{fit_unconstrained, NewtonOptions};
use crate::simharness::{power_table, write_csv, ExperimentGrid};

use report::{FitSummary, ModelSummary, RunReport, TestSummary, Timing, ToolInfo, SCHEMA_VERSION};
use table::{build_model, InputTable, ModelData, RandomSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_SINGULAR: i32 = 4;
pub const EXIT_BOOTSTRAP: i32 = 5;

/// Default bootstrap size of `test`.
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotConverged { .. } | Error::NumericFailure { .. } | Error::OutsideParameterSpace => {
            EXIT_NOT_CONVERGED
        }
        Error::RankDeficient { what, .. } if what.starts_with("contrast") => EXIT_INPUT,
        Error::RankDeficient { .. }
        | Error::ConfoundedDesign { .. }
        | Error::SingularTriangular { .. }
        | Error::InvalidDesign(_) => EXIT_SINGULAR,
        Error::BootstrapFailures { .. } => EXIT_BOOTSTRAP,
        Error::DimensionMismatch { .. }
        | Error::NonFinite(_)
        | Error::DegenerateResponse(_)
        | Error::InvalidInput(_) => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "varcomp", version, about = "Variance components: fits and bootstrap tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit `τ̂` by minimizing the normalized residual likelihood.
    Fit(FitArgs),
    /// Parametric bootstrap test of `Aτ = 0`.
    Test(TestArgs),
    /// Run a size/power simulation grid.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
#[group(id = "effects", required = true, multiple = false)]
pub struct RandomArgs {
    /// A random factor (repeatable; `a:b` is an interaction). Flag order sets τ order.
    #[arg(long = "random", value_name = "FACTOR")]
    pub random: Vec<String>,
    /// Nested factors, outermost first: `a/b`.
    #[arg(long, value_name = "A/B")]
    pub nested: Option<String>,
    /// Crossed factors: `a,b`.
    #[arg(long, value_name = "A,B")]
    pub crossed: Option<String>,
}

impl RandomArgs {
    pub fn spec(&self) -> Result<RandomSpec> {
        if let Some(n) = &self.nested {
            RandomSpec::parse_nested(n)
        } else if let Some(c) = &self.crossed {
            RandomSpec::parse_crossed(c)
        } else {
            Ok(RandomSpec::Random(self.random.clone()))
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Input CSV with a header row.
    pub csv: PathBuf,
    /// Response column.
    #[arg(long)]
    pub response: String,
    #[command(flatten)]
    pub random: RandomArgs,
    /// Fixed-effect columns; numeric columns enter as covariates, others as factors.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<String>,
    /// Fixed-effect columns always treated as factors.
    #[arg(long, value_delimiter = ',')]
    pub fixed_factor: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Rows of A separated by `;`, entries by `,`.
    #[arg(long, allow_hyphen_values = true)]
    pub contrast: String,
    /// `two-sided`, or one of greater|less|free per row of A, comma separated.
    #[arg(long, default_value = "two-sided")]
    pub alt: String,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
    pub bootstrap: usize,
    /// Root seed; required.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "lr", value_parser = parse_statistic)]
    pub statistic: Statistic,
    /// Report `(k + 1)/(B + 1)`.
    #[arg(long)]
    pub plus_one: bool,
    /// Per-replicate CSV: b, tau_star_1..d, lambda_star.
    #[arg(long)]
    pub dump_draws: Option<PathBuf>,
    /// Worker threads (overrides WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON grid manifest.
    #[arg(long)]
    pub config: PathBuf,
    /// CSV output; the resolved manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (overrides WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_statistic(s: &str) -> std::result::Result<Statistic, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `"1,-1;0,1"` into rows.
pub fn parse_contrast(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("contrast entry {v:?} is not a number")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidInput("contrast rows differ in length".into()));
    }
    Ok(rows)
}

/// Parse `two-sided` or a per-row list such as `greater,less`.
pub fn parse_alternative(text: &str, rows: usize) -> Result<Alternative> {
    if text.trim() == "two-sided" {
        return Ok(Alternative::TwoSided);
    }
    let cone = text
        .split(',')
        .map(|t| match t.trim() {
            "greater" => Ok(RowConstraint::Greater),
            "less" => Ok(RowConstraint::Less),
            "free" => Ok(RowConstraint::Free),
            other => Err(Error::InvalidInput(format!("unknown alternative {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if cone.len() != rows {
        return Err(Error::InvalidInput(format!(
            "--alt lists {} constraints for {rows} contrast rows",
            cone.len()
        )));
    }
    Ok(Alternative::OneSided(cone))
}

/// `--workers`, else `WORKERS`, else the ambient pool.
pub fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("WORKERS={v:?} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn load_model(args: &ModelArgs) -> Result<(ModelData, ModelSummary)> {
    let table = InputTable::read(&args.csv)?;
    let data = build_model(
        &table,
        &args.response,
        &args.random.spec()?,
        &args.fixed,
        &args.fixed_factor,
    )?;
    let summary = ModelSummary {
        response: args.response.clone(),
        n: data.design.n(),
        p: data.design.p(),
        d: data.design.d(),
        components: data.component_names.clone(),
        levels: data.component_levels.clone(),
        fixed: data.fixed_names.clone(),
    };
    Ok((data, summary))
}

fn emit(out: Option<&Path>, report: &RunReport, stdout: &mut dyn Write) -> Result<()> {
    let json = report.to_json();
    match out {
        Some(path) => {
            report::write_atomic(path, json.as_bytes())?;
            let taus: Vec<String> = report
                .fit
                .tau
                .iter()
                .map(|l| format!("{}={:.6}", l.name, l.value))
                .collect();
            let _ = writeln!(stdout, "tau_hat: {}", taus.join(", "));
            if let Some(t) = &report.test {
                let one = t.p_one.map_or(String::new(), |p| format!(", p_one={p}"));
                let _ = writeln!(stdout, "lambda={:.6}, p_two={}{one}", t.lambda, t.p_two);
            }
            let _ = writeln!(stdout, "report written to {}", path.display());
        }
        None => {
            let _ = writeln!(stdout, "{json}");
        }
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs, stdout: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let (data, model) = load_model(&args.model)?;
    let cache = Arc::new(DesignCache::new(data.design)?);
    let lik = LikelihoodCache::new(cache, data.response)?;
    let fit = fit_unconstrained(&lik, &NewtonOptions::default())?;
    if !fit.converged() {
        return Err(Error::NotConverged {
            what: "unconstrained fit",
            status: format!("{:?}", fit.status),
        });
    }
    let report = RunReport {
        schema: SCHEMA_VERSION,
        tool: ToolInfo::current(),
        command: "fit".into(),
        fit: FitSummary::new(&model.components, &fit),
        model,
        test: None,
        timing: Timing {
            seconds: start.elapsed().as_secs_f64(),
            workers: None,
        },
    };
    emit(args.model.out.as_deref(), &report, stdout)
}

fn draws_csv(res: &crate::bootstrap::TestResult, d: usize) -> Result<Vec<u8>> {
    let io = |e: csv::Error| Error::InvalidInput(format!("draws CSV: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["b".to_string()];
    header.extend((1..=d).map(|j| format!("tau_star_{j}")));
    header.push("lambda_star".into());
    w.write_record(&header).map_err(io)?;
    for draw in &res.draws {
        let mut row = vec![draw.b.to_string()];
        row.extend(draw.tau_star.as_slice().iter().map(f64::to_string));
        row.push(draw.lambda_star.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("draws CSV: {e}")))
}

fn cmd_test(args: &TestArgs, stdout: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let seed = args
        .seed
        .ok_or_else(|| Error::InvalidInput("--seed is required for bootstrap runs".into()))?;
    let workers = resolve_workers(args.workers)?;
    let rows = parse_contrast(&args.contrast)?;
    let alternative = parse_alternative(&args.alt, rows.len())?;
    let (data, model) = load_model(&args.model)?;
    if rows[0].len() != model.d {
        return Err(Error::InvalidInput(format!(
            "contrast has {} columns but the model has {} components",
            rows[0].len(),
            model.d
        )));
    }
    let a = DMatrix::from_fn(rows.len(), model.d, |i, j| rows[i][j]);
    let contrast = ContrastSpec::new(a, alternative.clone())?;
    let cache = Arc::new(DesignCache::new(data.design)?);
    let opts = TestOptions {
        statistic: args.statistic,
        plus_one: args.plus_one,
        workers,
        newton: NewtonOptions::default(),
    };
    let res = bootstrap_test(&cache, &data.response, &contrast, args.bootstrap, seed, &opts)?;
    if let Some(path) = &args.dump_draws {
        report::write_atomic(path, &draws_csv(&res, model.d)?)?;
    }
    let report = RunReport {
        schema: SCHEMA_VERSION,
        tool: ToolInfo::current(),
        command: "test".into(),
        fit: FitSummary::new(&model.components, &res.fit),
        test: Some(TestSummary::new(&model.components, rows, alternative, &res)),
        model,
        timing: Timing {
            seconds: start.elapsed().as_secs_f64(),
            workers,
        },
    };
    emit(args.model.out.as_deref(), &report, stdout)
}

/// `results.csv` → `results.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", args.config.display())))?;
    let mut grid = ExperimentGrid::from_json(&text)?;
    if let Some(seed) = args.seed {
        grid.seed = seed;
    }
    let workers = resolve_workers(args.workers)?;
    let results = power_table(&grid, workers, None)?;
    let mut csv = Vec::new();
    write_csv(&results, &mut csv)?;
    report::write_atomic(&args.out, &csv)?;
    report::write_atomic(&manifest_path(&args.out), grid.to_json().as_bytes())?;
    for r in &results {
        if r.point.known_size_distortion() {
            let _ = writeln!(
                stderr,
                "note: cell {} (m={}, n={}, rho={}) is an unbalanced crossed regime with known size distortion",
                r.cell, r.point.size.m, r.point.size.n, r.point.size.r_or_rho
            );
        }
        if let Some(e) = &r.first_error {
            let _ = writeln!(stderr, "warning: {} of {} replicates failed; {e}", r.n_failed, r.s);
        }
    }
    let _ = writeln!(stdout, "{} cells written to {}", results.len(), args.out.display());
    Ok(())
}

/// Run the CLI on `args` (including the program name) and return the exit
/// code. Output goes to the given streams.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, stdout),
        Command::Test(a) => cmd_test(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout, stderr),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_and_alternative_parsing() {
        assert_eq!(parse_contrast("1,-1").unwrap(), vec![vec![1.0, -1.0]]);
        assert_eq!(
            parse_contrast("1, -1; 0,1").unwrap(),
            vec![vec![1.0, -1.0], vec![0.0, 1.0]]
        );
        assert!(parse_contrast("1,x").is_err());
        assert!(parse_contrast("1,2;3").is_err());
        assert_eq!(parse_alternative("two-sided", 2).unwrap(), Alternative::TwoSided);
        assert_eq!(
            parse_alternative("greater,less", 2).unwrap(),
            Alternative::OneSided(vec![RowConstraint::Greater, RowConstraint::Less])
        );
        assert!(parse_alternative("greater", 2).is_err());
        assert!(parse_alternative("bigger", 1).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 2);
        assert_eq!(
            exit_code(&Error::RankDeficient {
                what: "contrast matrix A",
                rank: 1,
                expected: 2
            }),
            2
        );
        assert_eq!(
            exit_code(&Error::RankDeficient {
                what: "fixed-effect matrix X",
                rank: 1,
                expected: 2
            }),
            4
        );
        assert_eq!(exit_code(&Error::ConfoundedDesign { component: 0 }), 4);
        assert_eq!(exit_code(&Error::OutsideParameterSpace), 3);
        assert_eq!(exit_code(&Error::BootstrapFailures { failed: 20, total: 100 }), 5);
    }

    #[test]
    fn manifest_sits_next_to_the_table() {
        assert_eq!(manifest_path(Path::new("out/res.csv")), PathBuf::from("out/res.manifest.json"));
    }
}
