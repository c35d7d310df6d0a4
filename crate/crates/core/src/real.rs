use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type a tape can run in.
///
/// Training runs in `f32`; gradient verification runs in `f64` because
/// 32-bit central differences are too noisy for a 1e-4 relative bound.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(f64::from(v))
    }

    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `exp` and `ln` always come from the `libm` crate. `Float`'s versions
    /// switch to the platform library when any crate in the build enables
    /// num-traits' `std` feature, which would change trained bits.
    fn libm_exp(self) -> Self;
    fn libm_ln(self) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn from_f32(v: f32) -> Self {
        v
    }

    fn to_f32(self) -> f32 {
        self
    }

    fn libm_exp(self) -> Self {
        libm::expf(self)
    }

    fn libm_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn libm_exp(self) -> Self {
        libm::exp(self)
    }

    fn libm_ln(self) -> Self {
        libm::log(self)
    }
}
