//! Scalar abstractions for the dense numerics.
//!
//! Layout and gradient-sync operations only need a ring with division, so
//! they work for exact rationals as well as floats. Forward passes need
//! transcendental functions and require [`FloatScalar`].

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num, NumAssign, Signed};

/// Element type of a [`DenseMatrix`](crate::DenseMatrix).
pub trait Scalar: Copy + Debug + PartialEq + Num + NumAssign + Signed + FromPrimitive {
    /// Lossy conversion used for error norms and reporting.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for num_rational::Ratio<i64> {
    fn to_f64_lossy(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl Scalar for num_rational::Ratio<i128> {
    fn to_f64_lossy(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// Floating-point scalars: everything the forward and backward passes need.
pub trait FloatScalar: Scalar + Float {
    fn from_f64_lossy(v: f64) -> Self;
}

impl FloatScalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl FloatScalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
