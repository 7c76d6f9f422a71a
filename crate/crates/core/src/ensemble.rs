//! Ensembles of model runs: design inputs paired with output fields.

use nalgebra::{DMatrix, DVector};

use crate::error::{CalError, Result};

/// A design of `n` runs over `p` inputs together with the `l x n` output matrix.
#[derive(Clone, Debug)]
pub struct Ensemble {
    design: DMatrix<f64>,
    outputs: DMatrix<f64>,
    mean: DVector<f64>,
    centred: DMatrix<f64>,
}

impl Ensemble {
    /// `design` is `n x p`, `outputs` is `l x n`. The mean and centred outputs
    /// are derived here.
    pub fn new(design: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let n = outputs.ncols();
        if design.nrows() != n {
            return Err(CalError::DimensionMismatch {
                expected: n,
                got: design.nrows(),
                context: "design rows must match output columns",
            });
        }
        if n < 2 {
            return Err(CalError::InvalidArgument(format!(
                "ensemble needs at least 2 runs, got {n}"
            )));
        }
        let l = outputs.nrows();
        let mut mean = DVector::zeros(l);
        for j in 0..n {
            mean += outputs.column(j);
        }
        mean /= n as f64;
        let mut centred = outputs.clone();
        for j in 0..n {
            let mut col = centred.column_mut(j);
            col -= &mean;
        }
        Ok(Self {
            design,
            outputs,
            mean,
            centred,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn centred(&self) -> &DMatrix<f64> {
        &self.centred
    }

    pub fn n_runs(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.design.ncols()
    }

    pub fn field_len(&self) -> usize {
        self.outputs.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn centring() {
        let design = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let outputs = DMatrix::from_column_slice(2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let e = Ensemble::new(design, outputs).unwrap();
        assert_relative_eq!(e.mean()[0], 2.0);
        assert_relative_eq!(e.mean()[1], 4.0);
        assert_relative_eq!(e.centred().column(0).sum(), -2.0);
        let row_sums = e.centred() * DVector::from_element(2, 1.0);
        assert_relative_eq!(row_sums.abs().max(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_run_rejected() {
        let design = DMatrix::from_row_slice(1, 1, &[0.0]);
        let outputs = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        assert!(Ensemble::new(design, outputs).is_err());
    }
}
