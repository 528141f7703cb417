//! Dense-tensor engine with reverse-mode differentiation and Adam.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use adam::{AdamConfig, AdamState};
pub use graph::{
    Gradients, Graph, Init, Mode, NodeId, OpKind, ParamDecl, ParamEntry, ParamStore, PROB_FLOOR,
};
