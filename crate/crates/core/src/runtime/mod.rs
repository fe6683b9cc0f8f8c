//! Minimal tensor and reverse-mode differentiation substrate.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheck, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use layers::{sinusoidal_pe, AttentionGate, Conv3x3, DenseCrossBlock, LayerNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamStore};
pub use tensor::{DType, Real, Tensor};
