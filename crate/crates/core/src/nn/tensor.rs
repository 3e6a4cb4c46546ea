//! Minimal dense tensor: a shape and a row-major f64 buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }
}
