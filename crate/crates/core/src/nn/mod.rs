//! Differentiable building blocks with explicit forward and backward passes.

mod batchnorm;
mod dense;
mod dropout;
pub mod gradcheck;
mod loss;
mod optim;

pub use batchnorm::{BatchNormCache, BatchNormGrads, BatchNormLayer};
pub use dense::{DenseGrads, DenseLayer};
pub use dropout::DropoutLayer;
pub use loss::{balanced_weights, balanced_xent, softmax_rows, BalancedLossSpec, PROB_FLOOR};
pub use optim::{apply_sgd, lr_at_epoch, sgd_step, SgdConfig};

/// Selects batch statistics and active dropout (training) versus running
/// statistics and identity dropout (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A mutable view of one trainable tensor.
pub struct ParamMut<'a, F> {
    pub name: &'static str,
    pub values: &'a mut [F],
    /// Whether weight decay applies (weight matrices only).
    pub decays: bool,
}
