//! Dense tensors, a reverse-mode tape, parameter groups and Adam.

mod graph;
mod mlp;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, ParamRef, Var};
pub use mlp::{mlp_depth, mlp_forward, mlp_forward_graph, push_mlp, Activation};
pub use params::{glorot_bound, glorot_init, AdamConfig, AdamState, ParamGroup};
pub(crate) use params::glorot_with;
pub use tensor::Tensor;
