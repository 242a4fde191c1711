//! Dense 3D scalar grids and the preprocessing applied to them.
//!
//! Voxel `(x, y, z)` lives at linear index `x + W * (y + H * z)`: x varies
//! fastest, then y, then z. Every module shares this order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::num::Scalar;

/// Grid extent `(W, H, D)` in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(w: usize, h: usize, d: usize) -> Dims {
        Dims([w, h, d])
    }

    pub const fn cube(n: usize) -> Dims {
        Dims([n, n, n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[0];
        let y = (i / self.0[0]) % self.0[1];
        let z = i / (self.0[0] * self.0[1]);
        [x, y, z]
    }

    pub fn min_axis(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    /// Continuous coordinate of the grid center, `(W/2, H/2, D/2)`.
    pub fn center(&self) -> Vec3 {
        [self.0[0] as f64 / 2.0, self.0[1] as f64 / 2.0, self.0[2] as f64 / 2.0]
    }

    /// True when `self` is strictly smaller than `other` on every axis.
    pub fn strictly_within(&self, other: &Dims) -> bool {
        (0..3).all(|a| self.0[a] < other.0[a])
    }

    pub fn fits_within(&self, other: &Dims) -> bool {
        (0..3).all(|a| self.0[a] <= other.0[a])
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::invalid(
                field,
                format!("dims must be positive, got {:?}", self.0),
            ));
        }
        Ok(())
    }

    /// Iterate `(linear index, [x, y, z])` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        (0..self.len()).map(move |i| (i, self.coords(i)))
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Dims(d)
    }
}

pub fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    for (a, s) in spacing.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                field: format!("spacing[{a}]"),
            });
        }
        if *s <= 0.0 {
            return Err(Error::invalid(format!("spacing[{a}]"), "must be positive"));
        }
    }
    Ok(())
}

/// Dense volume with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        dims.validate("dims")?;
        validate_spacing(spacing)?;
        if data.len() != dims.len() {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match dims {:?}", data.len(), dims.0),
            ));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    /// Unit-spacing volume from raw data; panics on a length mismatch.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.len(), "data length must equal W*H*D");
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self::from_vec(dims, vec![value; dims.len()])
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> T + Sync) -> Self {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::from_vec(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        validate_spacing(self.spacing)?;
        if let Some(i) = self.first_non_finite() {
            return Err(Error::NonFinite {
                field: format!("data[{i}] at {:?}", self.dims.coords(i)),
            });
        }
        Ok(())
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the box starting at `corner` with extent `size`.
    pub fn crop(&self, corner: [usize; 3], size: Dims) -> Result<Self> {
        for a in 0..3 {
            if corner[a] + size.0[a] > self.dims.0[a] {
                return Err(Error::invalid(
                    "crop",
                    format!("box {:?}+{:?} exceeds {:?}", corner, size.0, self.dims.0),
                ));
            }
        }
        let mut data = Vec::with_capacity(size.len());
        for z in 0..size.0[2] {
            for y in 0..size.0[1] {
                let start = self.dims.index(corner[0], corner[1] + y, corner[2] + z);
                data.extend_from_slice(&self.data[start..start + size.0[0]]);
            }
        }
        Ok(Volume3D {
            dims: size,
            spacing: self.spacing,
            data,
        })
    }

    /// Trilinear interpolation at continuous voxel coordinates (voxel
    /// centers at integer positions); coordinates are clamped to the grid.
    pub fn sample_trilinear(&self, p: Vec3) -> T {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let hi = (self.dims.0[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            let fl = c.floor();
            i0[a] = fl as usize;
            i1[a] = (i0[a] + 1).min(self.dims.0[a] - 1);
            f[a] = c - fl;
        }
        let v = |x: usize, y: usize, z: usize| self.get(x, y, z).as_f64();
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(v(i0[0], i0[1], i0[2]), v(i1[0], i0[1], i0[2]), f[0]);
        let c10 = lerp(v(i0[0], i1[1], i0[2]), v(i1[0], i1[1], i0[2]), f[0]);
        let c01 = lerp(v(i0[0], i0[1], i1[2]), v(i1[0], i0[1], i1[2]), f[0]);
        let c11 = lerp(v(i0[0], i1[1], i1[2]), v(i1[0], i1[1], i1[2]), f[0]);
        let c0 = lerp(c00, c10, f[1]);
        let c1 = lerp(c01, c11, f[1]);
        T::of(lerp(c0, c1, f[2]))
    }
}

/// Per-voxel foreground indicator, `intensity > 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    dims: Dims,
    data: Vec<bool>,
}

impl ForegroundMask {
    pub fn from_vec(dims: Dims, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), dims.len());
        ForegroundMask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of foreground voxels inside the box `corner + size`.
    pub fn fraction_in_box(&self, corner: [usize; 3], size: Dims) -> f64 {
        let mut hits = 0usize;
        for z in corner[2]..corner[2] + size.0[2] {
            for y in corner[1]..corner[1] + size.0[1] {
                let start = self.dims.index(corner[0], y, z);
                hits += self.data[start..start + size.0[0]].iter().filter(|&&b| b).count();
            }
        }
        hits as f64 / size.len() as f64
    }
}

pub fn foreground_mask<T: Scalar>(v: &Volume3D<T>) -> ForegroundMask {
    ForegroundMask {
        dims: v.dims(),
        data: v.data().iter().map(|&x| x > T::zero()).collect(),
    }
}

/// Min-max scaling to `[0, 1]`; a constant volume maps to all zeros.
pub fn min_max_normalize<T: Scalar>(v: &Volume3D<T>) -> Volume3D<T> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return v.map(|_| T::zero());
    }
    let range = hi - lo;
    v.map(move |x| ((x - lo) / range).clamp01())
}

/// Result of [`resample_isotropic`]. `degenerate_axes` lists axes whose
/// computed extent rounded to zero and was clamped to one voxel.
#[derive(Debug, Clone)]
pub struct Resampled<T> {
    pub volume: Volume3D<T>,
    pub degenerate_axes: Vec<usize>,
}

/// Trilinear resampling onto an isotropic grid of `target_spacing` mm.
///
/// Output voxel `i` has its center at physical position `(i + 0.5) * t`,
/// which maps to continuous source index `(i + 0.5) * t / s - 0.5`;
/// out-of-grid positions clamp to the border voxel.
pub fn resample_isotropic<T: Scalar>(v: &Volume3D<T>, target_spacing: f64) -> Result<Resampled<T>> {
    if !(target_spacing.is_finite() && target_spacing > 0.0) {
        return Err(Error::invalid("target_spacing", "must be positive and finite"));
    }
    let src = v.dims();
    let spacing = v.spacing();
    let mut out = [0usize; 3];
    let mut degenerate_axes = Vec::new();
    for a in 0..3 {
        let n = (src.0[a] as f64 * spacing[a] / target_spacing).round() as usize;
        if n == 0 {
            degenerate_axes.push(a);
        }
        out[a] = n.max(1);
    }
    let dims = Dims(out);
    let ratio = [
        target_spacing / spacing[0],
        target_spacing / spacing[1],
        target_spacing / spacing[2],
    ];
    let (lo, hi) = v.min_max();
    let resampled = Volume3D::from_fn(dims, |x, y, z| {
        let p = [
            (x as f64 + 0.5) * ratio[0] - 0.5,
            (y as f64 + 0.5) * ratio[1] - 0.5,
            (z as f64 + 0.5) * ratio[2] - 0.5,
        ];
        v.sample_trilinear(p).max(lo).min(hi)
    })
    .with_spacing([target_spacing; 3])?;
    Ok(Resampled {
        volume: resampled,
        degenerate_axes,
    })
}

/// Loading-time preprocessing applied to source volumes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    /// Resample to this isotropic spacing (mm) before anything else.
    pub resample_mm: Option<f64>,
    /// Min-max normalize intensities to `[0, 1]`.
    pub normalize: bool,
}

impl Preprocess {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.resample_mm {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("preprocess.resample_mm", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, v: Volume3D<T>) -> Result<Volume3D<T>> {
        let v = match self.resample_mm {
            Some(t) => resample_isotropic(&v, t)?.volume,
            None => v,
        };
        Ok(if self.normalize { min_max_normalize(&v) } else { v })
    }
}
