//! Dense row-major tensors, a define-by-run autodiff tape and the Adam
//! optimizer.
//!
//! Everything here is generic over [`Scalar`] so the same graph can be built
//! in `f32` for training and replayed in `f64` for gradient checking.

mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Bound, Gradients, Tape, Var};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Sum + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("mode-{mode} product: vector has length {vec_len} but the tensor has size {axis_len} along that mode")]
    ModeMismatch {
        mode: usize,
        vec_len: usize,
        axis_len: usize,
    },
    #[error("mode {mode} is out of range for a rank-{rank} tensor")]
    InvalidMode { mode: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// A dense tensor. A rank-0 tensor (shape `[]`) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("new", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.len() / self.rows();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.len() / self.rows();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contracts this tensor with `vec` along `mode` (1-based), dropping that
    /// axis. A rank-3 core becomes a matrix; three successive contractions
    /// leave a rank-0 scalar.
    pub fn mode_n_product(&self, vec: &[T], mode: usize) -> Result<Self, TensorError> {
        if mode == 0 || mode > self.rank() {
            return Err(TensorError::InvalidMode {
                mode,
                rank: self.rank(),
            });
        }
        let axis = mode - 1;
        if vec.len() != self.shape[axis] {
            return Err(TensorError::ModeMismatch {
                mode,
                vec_len: vec.len(),
                axis_len: self.shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let data = kernels::contract_axis(&self.data, vec, outer, n, inner);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }
}

/// `(product of dims before axis, dim at axis, product of dims after axis)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Free-function form of [`Tensor::mode_n_product`].
pub fn mode_n_product<T: Scalar>(
    core: &Tensor<T>,
    vec: &Tensor<T>,
    mode: usize,
) -> Result<Tensor<T>, TensorError> {
    if vec.rank() != 1 {
        return Err(shape_err(
            "mode_n_product",
            format!("expected a vector, got shape {:?}", vec.shape()),
        ));
    }
    core.mode_n_product(vec.data(), mode)
}
