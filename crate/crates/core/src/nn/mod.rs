//! Differentiable numerical kernels, parameters and optimizer.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod layer;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{grad_check, layer_probe, GradCheckReport, GradCheckable, LayerProbe};
pub use kernels::{log_softmax, softmax_xent, Segment};
pub use layer::{apply_layer, Layer, LayerInput, LayerKind};
pub use params::{GradTable, Param, ParamSet};
pub use tensor::{Float, Tensor};

/// Mean masked cross-entropy of `logits` (`positions × vocab`).
pub fn loss_xent<T: Float>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[T],
) -> crate::Result<f64> {
    softmax_xent(logits.data(), logits.cols(), targets, mask).map(|(l, _)| l)
}
