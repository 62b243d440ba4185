//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything trainable in this crate is built from these primitives: a
//! row-major [`Tensor`] holding 64-bit reals, an eager [`Tape`] that records
//! every executed op and replays it in reverse for gradients, and a
//! finite-difference checker that serves as the independent oracle for every
//! backward rule.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{load_checkpoint, save_checkpoint, CheckpointError, ParamBinding, ParamSet};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Dense row-major tensor of rank 0..=3. Rank 0 is a scalar (numel 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        let numel: usize = shape.iter().product();
        if shape.len() > 3 || shape.iter().any(|&d| d == 0) {
            return Err(KernelError::Shape {
                op: "tensor",
                detail: format!("unsupported shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(KernelError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} expects {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full_like(&self, x: f64) -> Self {
        Tensor { shape: self.shape.clone(), data: vec![x; self.data.len()] }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value; panics unless numel is 1.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with numel {}", self.data.len());
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
