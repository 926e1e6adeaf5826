//! Dense tensors, tape-based reverse-mode differentiation over layer
//! stacks, weight initialization, and an adaptive-moment optimizer.

mod boundary;
mod layers;
mod linalg;
mod params;
mod tensor;

pub use boundary::{boundary_map, BoundaryKind};
pub use layers::{
    Activation, BoundaryLayer, Gradients, LayerSpec, MacCount, Network, ParamRole, ParamSlot, Signature, Tape,
};
pub use params::{adam_step, init_weights, InitScheme, Param, ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
