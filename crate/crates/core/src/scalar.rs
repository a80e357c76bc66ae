use num_traits::{Float, NumAssignOps};

/// Scalar type all tensor math is generic over.
///
/// f32 is the working precision; f64 is used for verification runs
/// (finite-difference gradient checks need the extra headroom).
pub trait Scalar:
    Float + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32_(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_(self) -> f32 {
        self as f32
    }
}
