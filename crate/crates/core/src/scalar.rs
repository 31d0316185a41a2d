//! Scalar abstraction shared by the numeric modules.

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive};

/// Floating point type the learned and metric code is generic over: `f32` for
/// training and inference, `f64` for gradient checks and oracles.
pub trait Scalar: NdFloat + FromPrimitive + FloatConst + Default {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
