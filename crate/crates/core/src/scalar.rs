//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::{Complex, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point type the library is generic over (`f32` or `f64`).
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static
{
    /// Smallest positive normal value.
    const TINY: Self;

    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("representable count")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const TINY: Self = f32::MIN_POSITIVE;
}

impl Real for f64 {
    const TINY: Self = f64::MIN_POSITIVE;
}

pub type C<T> = Complex<T>;

#[inline]
pub fn cis<T: Real>(phase: T) -> C<T> {
    C::new(phase.cos(), phase.sin())
}

#[inline]
pub fn cre<T: Real>(x: T) -> C<T> {
    C::new(x, T::zero())
}
