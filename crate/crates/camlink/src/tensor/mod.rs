//! Reverse-mode automatic differentiation over dense 64-bit float tensors.
//!
//! The operator set is exactly what the model equations need: matrix
//! products, row softmax, layer norm, elementwise nonlinearities, reductions,
//! and a clamped binary cross entropy. A [`Tape`] records every operation of
//! a forward pass and replays it in reverse to populate gradients; the tape
//! is rebuilt per forward pass, there is no graph caching.
//!
//! Everything is f64 and row-major. Problem sizes stay tiny (n <= 32 nodes),
//! so there is no sparsity and no attempt at fused kernels.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod tape;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{AdamState, AdamW, Binding, GradAccumulator, Init, Param, ParamSet};
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Dense multi-dimensional f64 value, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(DTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        DTensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DTensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Validation("ragged rows in from_rows".into()));
        }
        DTensor::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Validation(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }
}

#[cfg(test)]
mod dtensor_tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(DTensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(DTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DTensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        assert!(DTensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = DTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.at2(1, 0), 3.0);
    }
}
