//! Scalar abstraction shared by every volumetric container.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of volumes, masks and score maps.
///
/// Geometry (voxel coordinates, rotations) is always computed in `f64`; only
/// stored intensities and weights are generic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Values outside the representable range
    /// saturate to infinity, which the finite-value checks then reject.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).unwrap_or(f32::NAN)
    }

    #[inline]
    fn clamp01(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_unit_interval() {
        assert_eq!((-0.5f32).clamp01(), 0.0);
        assert_eq!(1.5f64.clamp01(), 1.0);
        assert_eq!(0.25f32.clamp01(), 0.25);
    }

    #[test]
    fn conversions_round_trip_for_f32_values() {
        let v = 0.1f32;
        assert_eq!(f32::of(v.as_f64()), v);
        assert_eq!(f64::of(0.3).as_f32(), 0.3f32);
    }
}
