//! Scalar abstraction for the numerical core.
//!
//! Every volume, projection, channel, and network routine is generic over
//! [`Scalar`] so the same code runs in `f32` or `f64`. The shipped pipeline
//! and all persisted formats use `f64` (the default type parameter across
//! the crate); `f32` exists for experiments and memory-bound workloads.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable throughout the toolkit.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, panicking only on values no float type can hold
    /// (never happens for finite inputs).
    #[inline]
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to scalar")
    }

    /// Widens to `f64` for accumulation, I/O, and reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
