//! Scalar abstraction: all numeric kernels are generic over the element type.
//!
//! `f32` is the training dtype, `f64` backs the finite-difference test
//! harnesses. Concrete aliases live at the crate root.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_count(x: usize) -> Self {
        Self::of_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
