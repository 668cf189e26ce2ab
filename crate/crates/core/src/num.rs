//! Scalar abstraction for the geometric scoring layer.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the evidence and relation-scoring code is generic over.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Converts a literal constant. Panics only if the constant is not representable,
    /// which cannot happen for the weights used in this crate.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    #[inline]
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    /// `min(1, max(0, x))`
    #[inline]
    fn clip01(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds() {
        assert_eq!((-0.5f64).clip01(), 0.0);
        assert_eq!(1.5f32.clip01(), 1.0);
        assert_eq!(0.25f64.clip01(), 0.25);
    }

    #[test]
    fn literal_roundtrip() {
        assert_eq!(f32::lit(0.45), 0.45f32);
        assert_eq!(f64::from_count(7), 7.0);
    }
}
