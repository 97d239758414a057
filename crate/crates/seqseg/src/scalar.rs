//! Scalar abstraction: every numeric routine in the crate is generic over
//! `f32`/`f64` through this trait.

/// Floating-point scalar usable for volumes, network parameters and losses.
///
/// Training defaults to `f32`; verification code (finite-difference gradient
/// checks) instantiates the identical code paths at `f64`.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + for<'a> std::iter::Sum<&'a Self>
{
    /// Name recorded in checkpoints so a reload can verify the precision.
    const DTYPE: &'static str;

    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f(x: f64) -> Self;

    /// Widening conversion to `f64` (always exact).
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f(self) -> f64 {
        self
    }
}
