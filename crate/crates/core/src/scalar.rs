use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, MulAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive, Zero};

/// Floating point element type for table values, gradients and moments.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from a count or literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Anything the partitioning heuristics can sum and compare: integers,
/// floats, or exact rationals.
pub trait PartitionCost: Copy + PartialOrd + Zero + Add<Output = Self> + Sub<Output = Self> + Debug {}

impl<T> PartitionCost for T where T: Copy + PartialOrd + Zero + Add<Output = T> + Sub<Output = T> + Debug {}
