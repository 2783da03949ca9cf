//! The JSON run report (`schema: 1`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{Statistic, TestResult};
use crate::error::{Error, Result};
use crate::model::{Alternative, VarComponents};
use crate::optimizer::{FitResult, FitStatus};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// A value tagged with its component name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub name: String,
    pub value: f64,
}

pub fn label(names: &[String], tau: &VarComponents) -> Vec<Labeled> {
    names
        .iter()
        .zip(tau.as_slice())
        .map(|(name, &value)| Labeled {
            name: name.clone(),
            value,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub response: String,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub components: Vec<String>,
    /// Levels `m_j` of each component.
    pub levels: Vec<usize>,
    pub fixed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub tau: Vec<Labeled>,
    pub objective: f64,
    pub iterations: usize,
    pub halvings: usize,
    pub grad_norm: f64,
    pub hessian_eigenvalues: Vec<f64>,
    pub status: FitStatus,
}

impl FitSummary {
    pub fn new(names: &[String], fit: &FitResult) -> Self {
        FitSummary {
            tau: label(names, &fit.tau_hat),
            objective: fit.objective,
            iterations: fit.iterations,
            halvings: fit.halvings_total,
            grad_norm: fit.grad_norm,
            hessian_eigenvalues: fit.hessian_eigenvalues.clone(),
            status: fit.status.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub contrast: Vec<Vec<f64>>,
    pub alternative: Alternative,
    pub statistic: Statistic,
    pub null_fit: FitSummary,
    /// `L(τ̂₀) − L(τ̂)`, unclamped.
    pub lambda: f64,
    /// The statistic compared against the draws.
    pub observed: f64,
    pub p_two: f64,
    pub mc_se_two: f64,
    pub p_one: Option<f64>,
    pub mc_se_one: Option<f64>,
    pub bootstrap: usize,
    pub bootstrap_effective: usize,
    pub failed: usize,
    pub plus_one: bool,
    pub seed: u64,
}

impl TestSummary {
    pub fn new(names: &[String], contrast: Vec<Vec<f64>>, alternative: Alternative, res: &TestResult) -> Self {
        TestSummary {
            contrast,
            alternative,
            statistic: res.statistic,
            null_fit: FitSummary::new(names, &res.fit_null),
            lambda: res.lr_obs,
            observed: res.observed,
            p_two: res.p_two,
            mc_se_two: res.mc_se_two,
            p_one: res.p_one,
            mc_se_one: res.mc_se_one,
            bootstrap: res.b,
            bootstrap_effective: res.b_effective(),
            failed: res.n_failed,
            plus_one: res.plus_one,
            seed: res.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub tool: ToolInfo,
    pub command: String,
    pub model: ModelSummary,
    pub fit: FitSummary,
    pub test: Option<TestSummary>,
    pub timing: Timing,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("report: {e}")))?;
        if report.schema != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "report schema {} is not {SCHEMA_VERSION}",
                report.schema
            )));
        }
        Ok(report)
    }
}

/// Write through a sibling temporary file and rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidInput(format!("writing {}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}
