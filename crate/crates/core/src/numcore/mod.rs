//! Dense-layer numerics: row-major matrices, layers with exact reverse-mode
//! gradients, Adam, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layer;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheckConfig, GradCheckReport,
};
pub use layer::{
    backward_with_output as layer_backward, dense_backward, dense_forward, sigmoid, Activation,
    DenseLayer, LayerGrad, Mlp, MlpCache,
};
pub use tensor::Tensor2D;

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}
