//! Scalar abstractions.
//!
//! Aggregation rules and the unbiasing constants only need field arithmetic,
//! so they are generic over [`Scalar`], which exact rationals satisfy. Model
//! training and the theory estimators need transcendental functions and are
//! generic over [`Real`] (`f32` / `f64`).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, NumAssign, ToPrimitive};

/// Field-like scalar: `f32`, `f64`, or an exact rational such as `Ratio<i128>`.
pub trait Scalar:
    Copy + Num + NumAssign + FromPrimitive + PartialOrd + Debug + Send + Sync + 'static
{
    /// Converts a count, panicking only if the type cannot represent it.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }
}

impl<T> Scalar for T where
    T: Copy + Num + NumAssign + FromPrimitive + PartialOrd + Debug + Send + Sync + 'static
{
}

/// Floating point scalar used for model math.
pub trait Real: Scalar + Float + ToPrimitive + Sum + Display + Default {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
