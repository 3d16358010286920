//! Minimal dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! Everything is row-major `f32` on the CPU. The primitive set is fixed to
//! what the models in this crate need: matmul, elementwise add/mul, causal
//! dilated convolution, embedding lookup, layer normalization, GELU, softmax,
//! smoothed cross-entropy, and fused causal self-attention. Reductions
//! accumulate in `f64` internally so results are deterministic and
//! finite-difference checks stay tight.

mod adam;
pub mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamState};
pub use tape::{Node, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
