use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major tensor with a stable name, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            data.extend(row.iter());
        }
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_slice(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &DVector<f64>) -> Self {
        Self::from_slice(name, v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape || self.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {shape:?}",
                self.name, self.shape
            )));
        }
        Ok(())
    }
}
