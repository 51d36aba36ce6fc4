//! Tensor plumbing: the autodiff tape, parameterised layers and scalar kernels.

pub mod functional;
pub mod graph;
pub mod layers;

pub use graph::{avg_pool2, Gradients, Graph, ResizePlan, Trainable, Var};
pub use layers::{init_array, Init, LayerNorm, Linear, Parameterized, Tensor};
