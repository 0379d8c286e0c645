//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: shape plus row-major data. Differentiation
//! happens through a [`Tape`]: every arithmetic operation is a method on
//! the tape, which records the op when recording is enabled and at least
//! one input participates in gradients. A disabled tape runs the same
//! kernels without recording anything, which is what the zero-order
//! controller relies on — its allocation counter stays at zero.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_step, adam_step_direct, AdamState};
pub use gradcheck::{central_difference, max_rel_error, GRADCHECK_H, GRADCHECK_TOL};
pub use tape::{GradientMap, Tape};

use crate::error::{Error, Result};

/// Dense N-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// (tape uid, node index) when this value was recorded on a live tape.
    pub(crate) tape_ref: Option<(u64, usize)>,
    pub(crate) requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/data length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction saw {bad}")));
        }
        Ok(Tensor {
            shape,
            data,
            tape_ref: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            tape_ref: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        // Mutation detaches the value from any recorded history.
        self.tape_ref = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// The same value detached from any tape history.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            tape_ref: None,
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Standard normal tensor from the crate PRNG.
pub fn randn(shape: &[usize], rng: &mut crate::rng::Prng) -> Tensor {
    let numel = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: rng.gaussian_vec(numel),
        tape_ref: None,
        requires_grad: false,
    }
}
