//! Dense tensors and the reverse-mode autodiff engine built on them.
//!
//! Values are stored as `f64`. A tensor tagged [`DType::F32`] is rounded to
//! single precision whenever it is produced, so f32 and f64 tensors share one
//! set of kernels while keeping their numeric behaviour distinct.

pub mod blob;
mod kernels;
pub mod optim;
pub mod param;
pub mod tape;

pub use optim::{Optimizer, OptimizerKind};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    /// The wider of two dtypes; mixed inputs promote to f64.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds an f32 tensor. Values are rounded to single precision.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(dims, data, DType::F32)
    }

    pub fn new_f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(dims, data, DType::F64)
    }

    pub fn with_dtype(dims: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let n = checked_numel(dims)?;
        if n != data.len() {
            bail!(
                Dimension,
                "dims {:?} hold {} values but {} were given",
                dims,
                n,
                data.len()
            );
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype,
            data,
        })
    }

    /// Internal constructor for kernel outputs whose shape is already known to match.
    pub(crate) fn from_parts(dims: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Tensor { dims, dtype, data }
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Self {
        Self::full(dims, 0.0, dtype)
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n], dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![1], vec![value], dtype)
    }

    pub fn uniform(dims: &[usize], low: f64, high: f64, dtype: DType, rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(low..high)).collect();
        Self::from_parts(dims.to_vec(), data, dtype)
    }

    /// Fan-in scaled uniform initialization, bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(dims: &[usize], fan_in: usize, dtype: DType, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Self::uniform(dims, -bound, bound, dtype, rng)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers writing into an f32 tensor
    /// should call [`Tensor::round_in_place`] afterwards.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn round_in_place(&mut self) {
        if self.dtype == DType::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_parts(self.dims.clone(), self.data.clone(), dtype)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = checked_numel(dims)?;
        if n != self.numel() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.dims, dims);
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            bail!(Usage, "item() on tensor with {} elements", self.numel());
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.dims.is_empty() || start + len > self.dims[0] {
            bail!(
                Dimension,
                "rows {}..{} out of range for {:?}",
                start,
                start + len,
                self.dims
            );
        }
        let row = self.numel() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = len;
        Ok(Tensor {
            dims,
            dtype: self.dtype,
            data: self.data[start * row..(start + len) * row].to_vec(),
        })
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.dims.is_empty() {
            bail!(Dimension, "select_rows on a rank-0 tensor");
        }
        let row = self.numel() / self.dims[0].max(1);
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= self.dims[0] {
                bail!(Dimension, "row {} out of range for {:?}", r, self.dims);
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut dims = self.dims.clone();
        dims[0] = rows.len();
        Ok(Tensor {
            dims,
            dtype: self.dtype,
            data,
        })
    }

    /// Mean of absolute values; zero for empty tensors.
    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in each row of a rank-2 tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            bail!(Dimension, "argmax_rows expects rank 2, got {:?}", self.dims);
        }
        let cols = self.dims[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        bail!(Dimension, "extents must be positive, got {:?}", dims);
    }
    Ok(dims.iter().product())
}
