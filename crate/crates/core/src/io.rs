//! File formats: headerless CSV matrices, weight-matrix serialization and
//! JSON emulator bundles.
//!
//! Matrices are written row-major, one row per line, comma separated, with
//! `.` as the decimal separator and no header. Values use Rust's shortest
//! round-trip float formatting, so a write/read cycle is bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::emulator::{CoefficientEmulator, FieldEmulator, FitMode, GpSpec};
use crate::error::{CalError, Result};
use crate::weight::{WeightForm, WeightMatrix};

fn io_err(path: &Path, source: std::io::Error) -> CalError {
    CalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: String) -> CalError {
    CalError::Parse {
        path: path.display().to_string(),
        line,
        message,
    }
}

/// Read a headerless CSV matrix; every row must have the same length.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, idx + 1, format!("invalid number {:?}", field.trim()))
            })?;
            row.push(value);
        }
        if rows.is_empty() {
            width = row.len();
        } else if row.len() != width {
            return Err(parse_err(
                path,
                idx + 1,
                format!("row has {} fields, expected {}", row.len(), width),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "empty matrix file".to_string()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(flat.len() / width, width, &flat))
}

/// Write a matrix as headerless CSV.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a vector stored either as one column or one row.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() == 1 {
        Ok(m.column(0).into_owned())
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(parse_err(
            path,
            1,
            format!("expected a vector, got a {}x{} matrix", m.nrows(), m.ncols()),
        ))
    }
}

/// Write a vector as a one-column CSV.
pub fn write_vector_csv(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix_csv(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Write a weight matrix: diagonal form as a one-row CSV, dense form as a
/// square CSV.
pub fn write_weight_csv(path: &Path, w: &WeightMatrix) -> Result<()> {
    match w.form() {
        WeightForm::Diagonal(d) => {
            write_matrix_csv(path, &DMatrix::from_row_slice(1, d.len(), d))
        }
        WeightForm::Dense { .. } => write_matrix_csv(path, &w.to_dense()),
    }
}

/// Read a weight matrix; a single-row file is interpreted as a diagonal,
/// a square file as a dense matrix.
pub fn read_weight_csv(path: &Path) -> Result<WeightMatrix> {
    let m = read_matrix_csv(path)?;
    if m.nrows() == 1 && m.ncols() > 1 {
        WeightMatrix::diagonal(m.row(0).transpose().as_slice())
    } else if m.nrows() == m.ncols() {
        WeightMatrix::dense_with_jitter(m, 1e-8)
    } else {
        Err(parse_err(
            path,
            1,
            format!(
                "weight matrix must be square or a single row, got {}x{}",
                m.nrows(),
                m.ncols()
            ),
        ))
    }
}

/// Row-major matrix payload for JSON bundles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(CalError::DimensionMismatch {
                expected: self.rows * self.cols,
                got: self.data.len(),
                context: "matrix payload length",
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Serialized per-coefficient GP: the fitted state needed to rebuild the
/// emulator exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoefficientBundle {
    pub spec: GpSpec,
    pub inputs: MatrixData,
    pub targets: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub ml_fallback: bool,
}

/// Serialized field emulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmulatorBundle {
    pub basis: MatrixData,
    pub mean: Vec<f64>,
    pub discarded: MatrixData,
    pub discarded_vars: Vec<f64>,
    pub coefficients: Vec<CoefficientBundle>,
}

impl EmulatorBundle {
    pub fn from_emulator(em: &FieldEmulator) -> Self {
        Self {
            basis: MatrixData::from_matrix(em.basis.vectors()),
            mean: em.mean.as_slice().to_vec(),
            discarded: MatrixData::from_matrix(&em.discarded),
            discarded_vars: em.discarded_vars.as_slice().to_vec(),
            coefficients: em
                .coefficient_emulators
                .iter()
                .map(|c| CoefficientBundle {
                    spec: c.spec.clone(),
                    inputs: MatrixData::from_matrix(&c.inputs),
                    targets: c.targets.as_slice().to_vec(),
                    lengthscales: c.lengthscales.clone(),
                    ml_fallback: c.ml_fallback,
                })
                .collect(),
        }
    }

    /// Rebuild the emulator. Refitting with the stored lengthscales repeats
    /// the exact floating-point path of the original fit, so predictions
    /// after a reload are bit-identical.
    pub fn to_emulator(&self) -> Result<FieldEmulator> {
        let mut coefficient_emulators = Vec::with_capacity(self.coefficients.len());
        for c in &self.coefficients {
            let inputs = c.inputs.to_matrix()?;
            let targets = DVector::from_column_slice(&c.targets);
            let refit_spec = GpSpec {
                regressors: c.spec.regressors.clone(),
                nugget: c.spec.nugget,
                mode: FitMode::Fixed {
                    lengthscales: c.lengthscales.clone(),
                },
            };
            let mut em = CoefficientEmulator::fit(&inputs, &targets, &refit_spec)?;
            em.spec = c.spec.clone();
            em.ml_fallback = c.ml_fallback;
            coefficient_emulators.push(em);
        }
        Ok(FieldEmulator {
            basis: Basis::new(self.basis.to_matrix()?),
            coefficient_emulators,
            discarded: self.discarded.to_matrix()?,
            discarded_vars: DVector::from_column_slice(&self.discarded_vars),
            mean: DVector::from_column_slice(&self.mean),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CalError::InvalidArgument(format!("serialize bundle: {e}")))?;
        fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| parse_err(path, e.line(), format!("invalid bundle JSON: {e}")))
    }
}
