//! CSV ingestion and model assembly from named columns.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::designs::indicator_matrix;
use crate::error::{Error, Result};
use crate::model::DesignMatrices;

/// A CSV file held as text columns.
#[derive(Debug, Clone)]
pub struct InputTable {
    headers: Vec<String>,
    columns: Vec<Vec<String>>,
}

impl InputTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::InvalidInput(format!("CSV header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::InvalidInput(format!("CSV row {}: {e}", line + 2)))?;
            for (col, field) in columns.iter_mut().zip(record.iter()) {
                col.push(field.trim().to_string());
            }
        }
        Ok(InputTable { headers, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn column(&self, name: &str) -> Result<&[String]> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("no column named {name:?}")))?;
        let col = &self.columns[idx];
        if let Some(row) = col.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "column {name:?} has a missing value in data row {}",
                row + 1
            )));
        }
        Ok(col)
    }

    /// Parse a column as numbers (dot decimal separator).
    pub fn numeric(&self, name: &str) -> Result<DVector<f64>> {
        let col = self.column(name)?;
        let values = col
            .iter()
            .enumerate()
            .map(|(row, v)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "column {name:?}, data row {}: {v:?} is not a finite number",
                            row + 1
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(DVector::from_vec(values))
    }

    /// Integer codes in first-appearance order, with the level names.
    pub fn factor(&self, names: &[&str]) -> Result<Factor> {
        let cols = names.iter().map(|n| self.column(n)).collect::<Result<Vec<_>>>()?;
        let mut index: HashMap<Vec<&str>, usize> = HashMap::new();
        let mut levels = Vec::new();
        let mut codes = Vec::with_capacity(self.n_rows());
        for row in 0..self.n_rows() {
            let key: Vec<&str> = cols.iter().map(|c| c[row].as_str()).collect();
            let next = index.len();
            let code = *index.entry(key.clone()).or_insert_with(|| {
                levels.push(key.join(":"));
                next
            });
            codes.push(code);
        }
        Ok(Factor {
            name: names.join(":"),
            codes,
            levels,
        })
    }
}

/// A categorical column re-encoded to dense codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub codes: Vec<usize>,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn indicators(&self) -> DMatrix<f64> {
        indicator_matrix(&self.codes, self.levels.len())
    }
}

/// Random-effect structure requested on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "factors", rename_all = "kebab-case")]
pub enum RandomSpec {
    /// Independent factors, one component each; `a:b` is an interaction.
    Random(Vec<String>),
    /// `a/b/...`: `a`, then `b` within `a`, and so on.
    Nested(Vec<String>),
    /// `a,b,...`: crossed main effects.
    Crossed(Vec<String>),
}

impl RandomSpec {
    pub fn parse_nested(s: &str) -> Result<Self> {
        Ok(RandomSpec::Nested(split_names(s, '/')?))
    }

    pub fn parse_crossed(s: &str) -> Result<Self> {
        Ok(RandomSpec::Crossed(split_names(s, ',')?))
    }

    fn factors(&self, table: &InputTable) -> Result<Vec<Factor>> {
        match self {
            RandomSpec::Random(names) | RandomSpec::Crossed(names) => names
                .iter()
                .map(|n| {
                    let parts: Vec<&str> = n.split(':').map(str::trim).collect();
                    table.factor(&parts)
                })
                .collect(),
            RandomSpec::Nested(names) => (1..=names.len())
                .map(|k| {
                    let prefix: Vec<&str> = names[..k].iter().map(String::as_str).collect();
                    table.factor(&prefix)
                })
                .collect(),
        }
    }
}

fn split_names(s: &str, sep: char) -> Result<Vec<String>> {
    let names: Vec<String> = s.split(sep).map(|p| p.trim().to_string()).collect();
    if names.is_empty() || names.iter().any(String::is_empty) {
        return Err(Error::InvalidInput(format!("cannot parse factor list {s:?}")));
    }
    Ok(names)
}

/// Design, response and labels assembled from a table.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub design: DesignMatrices,
    pub response: DVector<f64>,
    pub component_names: Vec<String>,
    pub component_levels: Vec<usize>,
    pub fixed_names: Vec<String>,
}

/// Build `X = [1, fixed…, fixed_factors…]` and one `Z` block per random
/// factor. Numeric `fixed` columns enter as is; other `fixed` columns and
/// every `fixed_factors` column enter as treatment contrasts against their
/// first level.
pub fn build_model(
    table: &InputTable,
    response: &str,
    random: &RandomSpec,
    fixed: &[String],
    fixed_factors: &[String],
) -> Result<ModelData> {
    let n = table.n_rows();
    let y = table.numeric(response)?;
    let mut x_cols = vec![DVector::from_element(n, 1.0)];
    let mut fixed_names = vec!["(intercept)".to_string()];
    for name in fixed {
        match table.numeric(name) {
            Ok(v) => {
                x_cols.push(v);
                fixed_names.push(name.clone());
            }
            Err(_) => push_dummies(table, name, &mut x_cols, &mut fixed_names)?,
        }
    }
    for name in fixed_factors {
        push_dummies(table, name, &mut x_cols, &mut fixed_names)?;
    }
    let factors = random.factors(table)?;
    let design = DesignMatrices::new(
        DMatrix::from_columns(&x_cols),
        factors.iter().map(Factor::indicators).collect(),
    )?;
    Ok(ModelData {
        design,
        response: y,
        component_names: factors.iter().map(|f| f.name.clone()).collect(),
        component_levels: factors.iter().map(|f| f.levels.len()).collect(),
        fixed_names,
    })
}

fn push_dummies(
    table: &InputTable,
    name: &str,
    x_cols: &mut Vec<DVector<f64>>,
    names: &mut Vec<String>,
) -> Result<()> {
    let f = table.factor(&[name])?;
    let n = f.codes.len();
    for (level, label) in f.levels.iter().enumerate().skip(1) {
        x_cols.push(DVector::from_fn(n, |i, _| (f.codes[i] == level) as u8 as f64));
        names.push(format!("{name}={label}"));
    }
    Ok(())
}
