use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for every tensor in the crate. f32 is the training and
/// inference type; f64 exists solely for the finite-difference check mode,
/// where 32-bit rounding would drown the comparison.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static {
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
