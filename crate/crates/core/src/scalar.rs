//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and oracles run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating point type usable by the model, losses and metrics.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + FftNum
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts a literal; exact for every value the crate uses.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn as_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
