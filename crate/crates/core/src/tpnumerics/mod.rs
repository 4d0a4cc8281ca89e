//! Desk-scale dense execution of tensor-parallel MLP and attention blocks
//! and of gradient synchronization between replicas of different TP degree.

pub mod attention;
pub mod matrix;
pub mod mlp;
pub mod sync;

pub use attention::{
    attention_forward_dense, attention_forward_tp, contiguous_head_assignment, AttentionHead, AttentionLayer,
    AttentionReplica,
};
pub use matrix::DenseMatrix;
pub use mlp::{
    gelu, gelu_derivative, gelu_with, mlp_backward, mlp_forward_dense, mlp_forward_tp, ColumnFragment, MlpLayer,
    ShardedPair, TpReplica, GELU_CUBIC,
};
pub use sync::{execute_reshard, nonuniform_grad_sync, uniform_grad_sync, NonuniformSyncOutput, ReduceOp};
