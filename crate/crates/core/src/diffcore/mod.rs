//! Minimal reverse-mode autodiff kernel: dense 2-D tensors, a named
//! parameter store, a single-use compute record, the multi-head
//! cross-attention block, first-order optimizers and a finite-difference
//! gradient auditor.

pub mod attention;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use attention::{
    attention_block, init_attention_store, mh_cross_attention, register_attention_params,
    AttentionGraph, AttentionNodes,
};
pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_FD_COORDS, DEFAULT_FD_EPS};
pub use optim::{optimizer_step, Optimizer, Schedule};
pub use store::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
