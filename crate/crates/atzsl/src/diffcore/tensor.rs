//! Dense row-major tensors, 64-bit precision.

use crate::error::{Error, Result};

/// Dense real array with shape; the unit of all numerical computation.
///
/// Invariants upheld by every constructor:
/// - the product of the shape extents equals the data length,
/// - every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract. `ctx` names the
    /// operation for error messages.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>, ctx: &'static str) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: ctx,
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(ctx));
        }
        Ok(Tensor { shape, data })
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, "tensor construction")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; len],
        }
    }

    /// Rank-1 tensor from a vector of values.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::checked(vec![data.len()], data, "tensor construction")
    }

    /// Shape `[1]` tensor holding a single value.
    pub fn scalar(v: f64) -> Result<Self> {
        Self::checked(vec![1], vec![v], "tensor construction")
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::checked(vec![rows, cols], data, "tensor construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one entry (`[]` or `[1]`-like shapes).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Single entry of a scalar-shaped tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "item() requires a scalar-shaped tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Number of rows when viewed as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => 1,
        }
    }

    /// Entry (i, j) of a rank-2 tensor. No bounds grace: callers uphold shape.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rank-1 copy of row `i` of a rank-2 tensor.
    pub fn row_tensor(&self, i: usize) -> Result<Tensor> {
        Tensor::from_vec(self.row(i).to_vec())
    }

    /// L2 norm of all entries.
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for empty tensors).
    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }
}
