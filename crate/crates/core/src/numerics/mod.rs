//! Dense tensors, a tape-based reverse-mode autodiff graph, and the Adam optimizer.
//!
//! Every array in the model is a [`Tensor`]. Computations that need gradients are
//! recorded on a [`Graph`]; each op checks its output for NaN/Inf and reports
//! [`NumericsError::NonFinite`] instead of letting bad values propagate.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{gelu_scalar, Gradients, Graph, Padding, Var};
pub use params::{GradSet, ParamSet};
pub use tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("kernel size {0} is even; length-preserving padding needs an odd kernel")]
    EvenKernel(usize),
    #[error("dropout rate {0} is outside [0, 1)")]
    DropoutRate(f64),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{0}")]
    Invalid(String),
}

/// Standalone dropout on a plain tensor; the graph version is [`Graph::dropout`].
pub fn dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor, NumericsError> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                v * keep
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn check_rate(rate: f64) -> Result<(), NumericsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::DropoutRate(rate));
    }
    Ok(())
}

/// Row-wise softmax on a plain tensor (last axis).
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = x.last_dim();
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
    }
    out
}
