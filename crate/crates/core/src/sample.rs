use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CgctError, Result};

/// Outcome, scaled treatment and feature rows (covariates or their
/// representation) as consumed by every inference model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub y: DVector<f64>,
    pub a: DVector<f64>,
    /// n x k
    pub features: DMatrix<f64>,
}

impl Sample {
    pub fn new(y: DVector<f64>, a: DVector<f64>, features: DMatrix<f64>) -> Result<Self> {
        if y.len() != a.len() || y.len() != features.nrows() {
            return Err(CgctError::DimensionMismatch {
                expected: y.len(),
                got: features.nrows().min(a.len()),
            });
        }
        Ok(Self { y, a, features })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Sample {
        Sample {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            a: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.a[i])),
            features: DMatrix::from_fn(idx.len(), self.features.ncols(), |i, j| {
                self.features[(idx[i], j)]
            }),
        }
    }

    /// Treatment range `[min, max]` of the sample.
    pub fn treatment_range(&self) -> (f64, f64) {
        (self.a.min(), self.a.max())
    }
}

/// Where a row of an augmented sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Observed { row: usize },
    Generated { source: usize, draw: usize },
}
