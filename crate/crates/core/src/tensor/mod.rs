//! Dense float tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major `f32` buffer plus shape. Gradients
//! are accumulated into an interior slot during [`Tape::backward`]; everything
//! else about a tensor is frozen at creation. Ops record their backward
//! closures onto the active thread-local [`Tape`] (define-by-run), so
//! inference inside a training step — see [`no_grad`] — never pollutes the
//! graph.

mod loss;
mod nn;
mod ops;
pub mod optim;
mod tape;
#[cfg(test)]
mod tests;

pub use loss::{bce_with_logits, focal_loss, l1_loss, soft_dice_loss};
pub use nn::{conv2d, erf, gelu, layernorm, sigmoid, softmax, upsample2x_bilinear};
pub use ops::{
    add, add_bias_chw, add_row_vector, concat_rows, matmul, mean, mul, mul_scalar, reshape,
    scale_rows, slice_channel, slice_rows, sub, sum, transpose2d, weighted_sum,
};
pub use tape::{is_recording, no_grad, Tape};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) grad: RefCell<Option<Vec<f32>>>,
    pub(crate) requires_grad: bool,
}

/// Cheap handle to an immutable tensor buffer.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    /// Plain (non-trainable) tensor.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_parts(shape.to_vec(), data, false)
    }

    /// Trainable leaf; participates in backward whenever a tape is active.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_parts(shape.to_vec(), data, true)
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor::from_parts(shape, data, requires_grad)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(&[1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same buffer, detached from gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::new(&self.inner.shape, self.inner.data.clone())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub(crate) fn accumulate_grad(inner: &Inner, delta: &[f32]) {
    debug_assert_eq!(inner.data.len(), delta.len());
    let mut slot = inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

/// Gradient of `out`, or None when no gradient flowed to it (its entry is skipped).
pub(crate) fn out_grad(inner: &Inner) -> Option<Vec<f32>> {
    inner.grad.borrow().clone()
}
