//! Nonuniform tensor parallelism (NTP): shard mapping and gradient
//! resynchronization numerics, plus a cluster-scale failure and throughput
//! simulator for the DP-DROP, NTP and NTP-PW recovery policies.

pub mod error;
pub mod failure;
pub mod perfmodel;
pub mod policy;
pub mod scalar;
pub mod scenario;
pub mod shardmap;
pub mod simulator;
pub mod tpnumerics;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{FloatScalar, Scalar};
pub use tpnumerics::DenseMatrix;

pub type Matrix = DenseMatrix<f64>;
pub type MatrixF32 = DenseMatrix<f32>;
/// Exact rational matrix for layout and sync checks without rounding.
pub type ExactMatrix = DenseMatrix<num_rational::Ratio<i64>>;
