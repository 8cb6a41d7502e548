//! CSV ingestion with optional factor expansion, and the bundled M. bovis data.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Colony counts for the M. bovis decontamination experiment: 20 control plates,
/// seven HPC concentrations and four oxalic-acid concentrations (129 rows).
pub const MBOVIS_CSV: &str = include_str!("../data/mbovis.csv");

/// SHA-256 of [`MBOVIS_CSV`].
pub const MBOVIS_SHA256: &str = "990167c5b780c8824572b193a6d4b5d9b40ec864ca4a957f5249fdf5848685dc";

/// Which columns form the response and the design.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub response: String,
    /// Numeric covariate columns, used as-is.
    pub covariates: Vec<String>,
    /// Categorical column expanded into one indicator per non-reference level.
    pub factor: Option<String>,
    /// Reference level of `factor`; defaults to the first level in file order.
    pub reference: Option<String>,
}

impl DesignSpec {
    /// The design used for the bundled M. bovis data: one indicator per dose, control as reference.
    pub fn mbovis() -> Self {
        Self {
            response: "colonies".into(),
            covariates: Vec::new(),
            factor: Some("dose".into()),
            reference: Some("control".into()),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, spec: &DesignSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_dataset_from_reader(file, spec)
}

/// The bundled M. bovis dataset with the dose factor expanded (r = 129, 11 columns).
pub fn mbovis() -> Dataset {
    load_dataset_from_reader(MBOVIS_CSV.as_bytes(), &DesignSpec::mbovis())
        .expect("bundled data parses")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load_dataset_from_reader<R: Read>(reader: R, spec: &DesignSpec) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = column(&spec.response)?;
    let cov_cols: Vec<usize> = spec
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<_>>()?;
    let factor_col = spec.factor.as_deref().map(column).transpose()?;
    if cov_cols.is_empty() && factor_col.is_none() {
        return Err(Error::InvalidInput(
            "the design needs at least one covariate or a factor".into(),
        ));
    }

    let mut y = Vec::new();
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    let mut levels_by_row: Vec<String> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let raw = cell(y_col);
        let count: u64 = raw.parse().map_err(|_| Error::Parse {
            row,
            column: spec.response.clone(),
            message: format!("response '{raw}' is not a nonnegative integer"),
        })?;
        y.push(count);
        let mut values = Vec::with_capacity(cov_cols.len());
        for (name, &col) in spec.covariates.iter().zip(&cov_cols) {
            let raw = cell(col);
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: "value is not finite".into(),
                });
            }
            values.push(v);
        }
        numeric.push(values);
        if let Some(col) = factor_col {
            let level = cell(col);
            if level.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: spec.factor.clone().unwrap_or_default(),
                    message: "empty factor level".into(),
                });
            }
            levels_by_row.push(level.to_string());
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: spec.response.clone(),
            message: "no data rows".into(),
        });
    }

    let mut names = spec.covariates.clone();
    let mut labels = None;
    if let Some(factor) = &spec.factor {
        let mut levels: Vec<&str> = Vec::new();
        for l in &levels_by_row {
            if !levels.contains(&l.as_str()) {
                levels.push(l);
            }
        }
        let reference = spec.reference.as_deref().unwrap_or(levels[0]);
        if !levels.contains(&reference) {
            return Err(Error::InvalidInput(format!(
                "reference level '{reference}' does not occur in column '{factor}'"
            )));
        }
        let treated: Vec<&str> = levels.iter().copied().filter(|l| *l != reference).collect();
        if treated.is_empty() && names.is_empty() {
            return Err(Error::InvalidInput(format!(
                "factor '{factor}' has only the reference level"
            )));
        }
        for (values, level) in numeric.iter_mut().zip(&levels_by_row) {
            values.extend(treated.iter().map(|t| if *t == level { 1.0 } else { 0.0 }));
        }
        names.extend(treated.iter().map(|t| format!("{factor}={t}")));
        labels = Some(levels_by_row.clone());
    }
    Dataset::with_names(y, numeric, names, labels)
}
