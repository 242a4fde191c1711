//! Anomaly geometry: rotated cuboids, spheres, random-walk brush strokes,
//! affine augmentation and Gaussian edge smoothing.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::io::{read_json, read_volume, write_json, write_volume};
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from_seed};
use crate::volume::{Dims, Volume3D};

/// Slack in point-in-shape tests so voxel centers lying exactly on a
/// boundary are classified the same way under tiny perturbations.
const INSIDE_EPS: f64 = 1e-6;

/// Attempts made by [`augment_shape`] before giving up on empty results.
pub const AFFINE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Cuboid,
    Sphere,
    Brush,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Cuboid, ShapeFamily::Sphere, ShapeFamily::Brush];
}

/// Per-voxel anomaly weight in `[0, 1]` on a canvas the size of the
/// foreign patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMask<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> ShapeMask<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        dims.validate("mask.dims")?;
        if data.len() != dims.len() {
            return Err(Error::invalid("mask.data", "length does not match dims"));
        }
        if let Some(i) = data.iter().position(|w| !(*w >= T::zero() && *w <= T::one())) {
            return Err(Error::invalid(
                "mask.data",
                format!("weight at {:?} outside [0, 1]", dims.coords(i)),
            ));
        }
        Ok(ShapeMask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        ShapeMask {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        ShapeMask {
            dims,
            data: vec![T::one(); dims.len()],
        }
    }

    /// Binary mask of the voxels selected by `inside(x, y, z)`.
    pub fn from_predicate(dims: Dims, inside: impl Fn(usize, usize, usize) -> bool + Sync) -> Self {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = dims.coords(i);
                if inside(x, y, z) {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        ShapeMask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&w| w > T::zero()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_positive() == 0
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&w| w == T::zero() || w == T::one())
    }

    pub fn max_weight(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &w| m.max(w))
    }

    pub fn to_volume(&self) -> Volume3D<T> {
        Volume3D::from_vec(self.dims, self.data.clone())
    }

    pub fn from_volume(v: &Volume3D<T>) -> Result<Self> {
        Self::new(v.dims(), v.data().to_vec())
    }
}

/// Voxel center of index `i` in continuous canvas coordinates.
#[inline]
fn voxel_center(x: usize, y: usize, z: usize) -> Vec3 {
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

/// Cuboid of size `extent` centered on the canvas and rotated about the
/// canvas center by Euler angles `rotation` (radians, applied x then y then z).
pub fn gen_cuboid<T: Scalar>(dims: Dims, extent: Vec3, rotation: Vec3) -> Result<ShapeMask<T>> {
    dims.validate("canvas")?;
    for a in 0..3 {
        if !(extent[a] >= 1.0 && extent[a] <= dims.0[a] as f64) {
            return Err(Error::invalid(
                format!("extent[{a}]"),
                format!("{} outside [1, {}]", extent[a], dims.0[a]),
            ));
        }
    }
    let inverse = Mat3::from_euler(rotation).transpose();
    let center = dims.center();
    let half = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];
    Ok(ShapeMask::from_predicate(dims, |x, y, z| {
        let q = inverse.apply(geometry::sub(voxel_center(x, y, z), center));
        (0..3).all(|a| q[a].abs() <= half[a] + INSIDE_EPS)
    }))
}

/// Ball of `radius` voxels around the canvas center.
pub fn gen_sphere<T: Scalar>(dims: Dims, radius: f64) -> Result<ShapeMask<T>> {
    dims.validate("canvas")?;
    let max = dims.min_axis() as f64 / 2.0;
    if !(radius >= 1.0 && radius <= max) {
        return Err(Error::invalid("radius", format!("{radius} outside [1, {max}]")));
    }
    let mut data = vec![T::zero(); dims.len()];
    stamp_ball(&mut data, dims, dims.center(), radius);
    Ok(ShapeMask { dims, data })
}

/// Set every voxel whose center lies within `radius` of `center`.
fn stamp_ball<T: Scalar>(data: &mut [T], dims: Dims, center: Vec3, radius: f64) {
    let r2 = radius * radius + INSIDE_EPS;
    let range = |a: usize| {
        let lo = (center[a] - radius - 0.5).ceil().max(0.0) as usize;
        let hi = (center[a] + radius - 0.5).floor();
        if hi < 0.0 {
            return (1, 0);
        }
        (lo, (hi as usize).min(dims.0[a] - 1))
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let (z0, z1) = range(2);
    for z in z0..=z1 {
        let dz = z as f64 + 0.5 - center[2];
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - center[1];
            let rem = r2 - dz * dz - dy * dy;
            if rem < 0.0 {
                continue;
            }
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - center[0];
                if dx * dx <= rem {
                    data[dims.index(x, y, z)] = T::one();
                }
            }
        }
    }
}

/// Random-walk brush hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrushParams {
    /// Number of brush positions `S`.
    pub steps: usize,
    /// Starting brush radius, voxels.
    pub initial_radius: f64,
    /// Standard deviation of position and radius increments, voxels.
    pub step_sigma: f64,
    pub canvas: Dims,
}

impl BrushParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(self.initial_radius >= 1.0 && self.initial_radius.is_finite()) {
            return Err(Error::invalid("initial_radius", "must be at least 1"));
        }
        if !(self.step_sigma > 0.0 && self.step_sigma.is_finite()) {
            return Err(Error::invalid("step_sigma", "must be positive"));
        }
        self.canvas.validate("canvas")?;
        if self.canvas.min_axis() < 2 {
            return Err(Error::invalid("canvas", "must be at least 2 voxels on every axis"));
        }
        Ok(())
    }
}

/// Default hyper-parameter grid: every combination of S in {10, 20, 40},
/// r in {2, 4, 8} (scaled by canvas/64, at least 1) and sigma in {1, 2, 4}.
pub fn default_brush_grid(canvas: Dims) -> Vec<BrushParams> {
    let scale = canvas.min_axis() as f64 / 64.0;
    let mut grid = Vec::with_capacity(27);
    for steps in [10, 20, 40] {
        for r in [2.0, 4.0, 8.0] {
            for sigma in [1.0, 2.0, 4.0] {
                grid.push(BrushParams {
                    steps,
                    initial_radius: (r * scale).max(1.0),
                    step_sigma: sigma,
                    canvas,
                });
            }
        }
    }
    grid
}

/// Random-walk brush stroke.
///
/// The brush is stamped at its current state before each move, so `S = 1`
/// yields the centered sphere. Each move draws `(dx, dy, dz, dr)` from
/// `N(0, sigma)`, clamps the position to the canvas and the radius to
/// `[1, min(dims)/2]`, and paints the segment between the old and new
/// state with stamps at most half a voxel apart so the stroke stays
/// 26-connected.
pub fn gen_brush_walk<T: Scalar, R: Rng + ?Sized>(params: &BrushParams, rng: &mut R) -> Result<ShapeMask<T>> {
    params.validate()?;
    let dims = params.canvas;
    let max_radius = dims.min_axis() as f64 / 2.0;
    let normal = Normal::new(0.0, params.step_sigma).map_err(|e| Error::invalid("step_sigma", e.to_string()))?;
    let mut data = vec![T::zero(); dims.len()];
    let mut pos = dims.center();
    let mut radius = params.initial_radius.clamp(1.0, max_radius);
    stamp_ball(&mut data, dims, pos, radius);
    for _ in 1..params.steps {
        let delta = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let dr = normal.sample(rng);
        let mut next = geometry::add(pos, delta);
        for (a, c) in next.iter_mut().enumerate() {
            *c = c.clamp(0.0, dims.0[a] as f64);
        }
        let next_radius = (radius + dr).clamp(1.0, max_radius);
        let dist = geometry::norm2(geometry::sub(next, pos)).sqrt();
        let pieces = ((dist / 0.5).ceil() as usize).max(1);
        for j in 1..=pieces {
            let t = j as f64 / pieces as f64;
            let p = [
                pos[0] + (next[0] - pos[0]) * t,
                pos[1] + (next[1] - pos[1]) * t,
                pos[2] + (next[2] - pos[2]) * t,
            ];
            stamp_ball(&mut data, dims, p, radius + (next_radius - radius) * t);
        }
        pos = next;
        radius = next_radius;
    }
    Ok(ShapeMask { dims, data })
}

/// Affine warp about the canvas center: scale, then rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rotation: Vec3,
    pub scale: Vec3,
    pub translation: Vec3,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        rotation: [0.0; 3],
        scale: [1.0; 3],
        translation: [0.0; 3],
    };
}

/// Nearest-neighbor warp of `mask` by `affine`; voxels that map outside the
/// source canvas become zero.
pub fn warp_mask<T: Scalar>(mask: &ShapeMask<T>, affine: &Affine) -> Result<ShapeMask<T>> {
    if affine.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("affine.scale", "scale factors must be positive"));
    }
    let dims = mask.dims();
    let inverse_rotation = Mat3::from_euler(affine.rotation).transpose();
    let center = dims.center();
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            let p = geometry::sub(geometry::sub(voxel_center(x, y, z), center), affine.translation);
            let r = inverse_rotation.apply(p);
            let mut src = [0usize; 3];
            for a in 0..3 {
                let q = (center[a] + r[a] / affine.scale[a]).floor();
                if q < 0.0 || q >= dims.0[a] as f64 {
                    return T::zero();
                }
                src[a] = q as usize;
            }
            mask.get(src[0], src[1], src[2])
        })
        .collect();
    Ok(ShapeMask { dims, data })
}

/// Sampling ranges for random shape augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    /// Per-axis scale factor range.
    pub scale: (f64, f64),
    /// Upper bound of the per-axis rotation angle (radians), drawn from `[0, max)`.
    pub max_rotation: f64,
    /// Per-axis translation range as a fraction of the canvas extent.
    pub translation: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            scale: (0.7, 1.3),
            max_rotation: TAU,
            translation: (-0.1, 0.1),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("affine.scale", "need 0 < min <= max"));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation.is_finite()) {
            return Err(Error::invalid("affine.max_rotation", "must be non-negative"));
        }
        let (tlo, thi) = self.translation;
        if !(thi >= tlo && tlo.is_finite() && thi.is_finite()) {
            return Err(Error::invalid("affine.translation", "need min <= max"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, canvas: Dims, rng: &mut R) -> Affine {
        let mut a = Affine::IDENTITY;
        for i in 0..3 {
            a.rotation[i] = uniform(rng, (0.0, self.max_rotation));
            a.scale[i] = uniform(rng, self.scale);
            a.translation[i] = uniform(rng, self.translation) * canvas.0[i] as f64;
        }
        a
    }
}

/// Random affine augmentation. Empty results are redrawn up to
/// [`AFFINE_RETRIES`] times.
pub fn augment_shape<T: Scalar, R: Rng + ?Sized>(
    mask: &ShapeMask<T>,
    ranges: &AffineRanges,
    rng: &mut R,
) -> Result<(ShapeMask<T>, Affine)> {
    ranges.validate()?;
    for _ in 0..AFFINE_RETRIES {
        let affine = ranges.sample(mask.dims(), rng);
        let warped = warp_mask(mask, &affine)?;
        if !warped.is_empty() {
            return Ok((warped, affine));
        }
    }
    Err(Error::Generation(format!(
        "affine augmentation produced an empty shape {AFFINE_RETRIES} times"
    )))
}

/// Normalized 1D Gaussian taps of odd length `size`, sigma = size / 6.
pub fn gaussian_kernel(size: usize) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::invalid("kernel_size", format!("{size} is not odd")));
    }
    let sigma = size as f64 / 6.0;
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Zero-padded separable convolution of a dense grid with a symmetric
/// odd-length kernel.
pub(crate) fn convolve_separable(data: &[f64], dims: Dims, kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims.0[axis];
        let stride = match axis {
            0 => 1,
            1 => dims.0[0],
            _ => dims.0[0] * dims.0[1],
        };
        let src = cur;
        cur = (0..dims.len())
            .into_par_iter()
            .map(|i| {
                let pos = dims.coords(i)[axis];
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let off = k as isize - half as isize;
                    let j = pos as isize + off;
                    if j >= 0 && (j as usize) < n {
                        let idx = (i as isize + off * stride as isize) as usize;
                        acc += w * src[idx];
                    }
                }
                acc
            })
            .collect();
    }
    cur
}

/// Gaussian edge smoothing of a shape mask (`kernel_size` odd).
pub fn smooth_mask<T: Scalar>(mask: &ShapeMask<T>, kernel_size: usize) -> Result<ShapeMask<T>> {
    let kernel = gaussian_kernel(kernel_size)?;
    let input: Vec<f64> = mask.data().iter().map(|w| w.as_f64()).collect();
    let data = convolve_separable(&input, mask.dims(), &kernel)
        .into_iter()
        .map(|v| T::of(v).clamp01())
        .collect();
    Ok(ShapeMask {
        dims: mask.dims(),
        data,
    })
}

/// A fixed collection of brush-walk shapes reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeLibrary<T> {
    pub shapes: Vec<ShapeMask<T>>,
    pub params: Vec<BrushParams>,
    pub seed: u64,
}

impl<T: Scalar> ShapeLibrary<T> {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn canvas(&self) -> Option<Dims> {
        self.shapes.first().map(|s| s.dims())
    }
}

/// Build `count` brush-walk shapes, cycling through `grid`. Shape `i` uses
/// the generator seeded by `derive_seed(seed, i)`, so the result does not
/// depend on thread scheduling.
pub fn build_shape_library<T: Scalar>(count: usize, grid: &[BrushParams], seed: u64) -> Result<ShapeLibrary<T>> {
    if count == 0 {
        return Err(Error::invalid("count", "must be at least 1"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("grid", "must not be empty"));
    }
    for p in grid {
        p.validate()?;
    }
    let params: Vec<BrushParams> = (0..count).map(|i| grid[i % grid.len()]).collect();
    let shapes = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| gen_brush_walk(p, &mut rng_from_seed(derive_seed(seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeLibrary { shapes, params, seed })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryEntry {
    pub file: String,
    pub params: BrushParams,
    pub voxels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryIndex {
    pub seed: u64,
    pub entries: Vec<LibraryEntry>,
}

pub const LIBRARY_INDEX: &str = "library.json";

pub fn save_library<T: Scalar>(lib: &ShapeLibrary<T>, dir: &Path) -> Result<LibraryIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = lib
        .shapes
        .par_iter()
        .zip(lib.params.par_iter())
        .enumerate()
        .map(|(i, (shape, params))| {
            let file = format!("shape_{i:04}.rvol");
            write_volume(&shape.to_volume(), dir.join(&file))?;
            Ok(LibraryEntry {
                file,
                params: *params,
                voxels: shape.count_positive(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = LibraryIndex {
        seed: lib.seed,
        entries,
    };
    write_json(&dir.join(LIBRARY_INDEX), &index)?;
    Ok(index)
}

pub fn load_library<T: Scalar>(dir: &Path) -> Result<ShapeLibrary<T>> {
    let index: LibraryIndex = read_json(&dir.join(LIBRARY_INDEX))?;
    let shapes = index
        .entries
        .par_iter()
        .map(|e| ShapeMask::from_volume(&read_volume::<T>(dir.join(&e.file))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeLibrary {
        shapes,
        params: index.entries.iter().map(|e| e.params).collect(),
        seed: index.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    type M = ShapeMask<f32>;

    #[test]
    fn full_extent_cuboid_fills_canvas() {
        let d = Dims::new(6, 5, 4);
        let m: M = gen_cuboid(d, [6.0, 5.0, 4.0], [0.0; 3]).unwrap();
        assert_eq!(m.count_positive(), d.len());
    }

    #[test]
    fn unit_cuboid_is_center_voxel() {
        let m: M = gen_cuboid(Dims::cube(5), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(m.count_positive(), 1);
        assert_eq!(m.get(2, 2, 2), 1.0);
    }

    #[test]
    fn rotated_bar_keeps_voxel_count() {
        // Brute-force point-in-box rasterization of both orientations.
        let count = |ext: [f64; 3]| {
            let mut n = 0;
            for z in 0..7 {
                for y in 0..7 {
                    for x in 0..7 {
                        let q = [x as f64 - 3.0, y as f64 - 3.0, z as f64 - 3.0];
                        if (0..3).all(|a| q[a].abs() <= ext[a] / 2.0) {
                            n += 1;
                        }
                    }
                }
            }
            n
        };
        assert_eq!(count([3.0, 1.0, 1.0]), 3);
        assert_eq!(count([1.0, 3.0, 1.0]), 3);
        let flat: M = gen_cuboid(Dims::cube(7), [3.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let turned: M = gen_cuboid(Dims::cube(7), [3.0, 1.0, 1.0], [0.0, 0.0, FRAC_PI_2]).unwrap();
        assert_eq!(flat.count_positive(), 3);
        assert_eq!(turned.count_positive(), 3);
        assert_eq!(turned.get(3, 2, 3), 1.0);
        assert_eq!(turned.get(2, 3, 3), 0.0);
    }

    #[test]
    fn cuboid_rejects_oversized_extent() {
        assert!(gen_cuboid::<f32>(Dims::cube(4), [5.0, 1.0, 1.0], [0.0; 3]).is_err());
        assert!(gen_cuboid::<f32>(Dims::cube(4), [0.5, 1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn unit_sphere_is_seven_voxels() {
        let mut expected = 0;
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let d2 = [x, y, z].iter().map(|&c| (c as f64 - 2.0).powi(2)).sum::<f64>();
                    if d2 <= 1.0 {
                        expected += 1;
                    }
                }
            }
        }
        let m: M = gen_sphere(Dims::cube(5), 1.0).unwrap();
        assert_eq!(expected, 7);
        assert_eq!(m.count_positive(), 7);
    }

    #[test]
    fn largest_sphere_misses_corners() {
        let d = Dims::cube(8);
        let m: M = gen_sphere(d, 4.0).unwrap();
        for &x in &[0, 7] {
            for &y in &[0, 7] {
                for &z in &[0, 7] {
                    assert_eq!(m.get(x, y, z), 0.0);
                }
            }
        }
        assert_eq!(m, gen_sphere(d, 4.0).unwrap());
        assert!(gen_sphere::<f32>(d, 4.5).is_err());
        assert!(gen_sphere::<f32>(d, 0.5).is_err());
    }

    #[test]
    fn single_step_brush_is_centered_sphere() {
        let p = BrushParams {
            steps: 1,
            initial_radius: 3.0,
            step_sigma: 2.0,
            canvas: Dims::cube(16),
        };
        let walk: M = gen_brush_walk(&p, &mut rng_from_seed(5)).unwrap();
        assert_eq!(walk, gen_sphere(Dims::cube(16), 3.0).unwrap());
    }

    #[test]
    fn vanishing_sigma_brush_is_single_stamp() {
        for canvas in [Dims::cube(15), Dims::cube(16)] {
            let p = BrushParams {
                steps: 10,
                initial_radius: 3.0,
                step_sigma: 1e-9,
                canvas,
            };
            let walk: M = gen_brush_walk(&p, &mut rng_from_seed(9)).unwrap();
            assert_eq!(walk, gen_sphere(canvas, 3.0).unwrap());
        }
    }

    #[test]
    fn brush_params_validation() {
        let ok = BrushParams {
            steps: 1,
            initial_radius: 1.0,
            step_sigma: 1.0,
            canvas: Dims::cube(8),
        };
        assert!(ok.validate().is_ok());
        assert!(BrushParams { steps: 0, ..ok }.validate().is_err());
        assert!(BrushParams {
            initial_radius: 0.5,
            ..ok
        }
        .validate()
        .is_err());
        assert!(BrushParams { step_sigma: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn identity_warp_is_noop() {
        let p = BrushParams {
            steps: 20,
            initial_radius: 2.0,
            step_sigma: 1.5,
            canvas: Dims::new(12, 10, 14),
        };
        let m: M = gen_brush_walk(&p, &mut rng_from_seed(3)).unwrap();
        assert_eq!(warp_mask(&m, &Affine::IDENTITY).unwrap(), m);
    }

    #[test]
    fn half_scale_shrinks_volume_by_eight() {
        let d = Dims::cube(32);
        let full = M::full(d);
        let a = Affine {
            scale: [0.5; 3],
            ..Affine::IDENTITY
        };
        // Point-mapping oracle: a voxel survives iff its preimage lies in the canvas.
        let mut expected = 0usize;
        for (_, [x, y, z]) in d.iter() {
            let inside = [x, y, z].iter().all(|&c| {
                let q = 16.0 + (c as f64 + 0.5 - 16.0) / 0.5;
                (0.0..32.0).contains(&q)
            });
            expected += inside as usize;
        }
        let got = warp_mask(&full, &a).unwrap().count_positive();
        assert_eq!(got, expected);
        let ratio = got as f64 / (d.len() as f64 / 8.0);
        assert!((0.8..=1.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn shape_leaving_canvas_exhausts_retries() {
        let m: M = gen_sphere(Dims::cube(8), 2.0).unwrap();
        let ranges = AffineRanges {
            translation: (2.0, 2.0),
            ..AffineRanges::default()
        };
        let err = augment_shape(&m, &ranges, &mut rng_from_seed(1)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        let (ok, _) = augment_shape(&m, &AffineRanges::default(), &mut rng_from_seed(1)).unwrap();
        assert!(!ok.is_empty() && ok.is_binary());
    }

    #[test]
    fn kernel_taps_sum_to_one() {
        for k in [1, 3, 5, 7, 9] {
            let t = gaussian_kernel(k).unwrap();
            assert_eq!(t.len(), k);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_kernel(4).is_err());
        assert!(smooth_mask(&M::full(Dims::cube(4)), 6).is_err());
    }

    #[test]
    fn smoothing_preserves_interior_and_far_field() {
        let d = Dims::cube(16);
        let full = M::full(d);
        for k in [3, 5, 7] {
            let s = smooth_mask(&full, k).unwrap();
            let h = k / 2;
            for (i, c) in d.iter() {
                if c.iter().all(|&v| v >= h && v < 16 - h) {
                    assert!((s.data()[i] - 1.0).abs() < 1e-6);
                }
            }
        }
        let cube: M = gen_cuboid(d, [4.0; 3], [0.0; 3]).unwrap();
        let s = smooth_mask(&cube, 7).unwrap();
        assert_eq!(s.get(0, 0, 0), 0.0);
        assert_eq!(s.get(15, 15, 15), 0.0);
    }

    #[test]
    fn impulse_response_matches_dense_convolution() {
        let d = Dims::cube(9);
        let mut data = vec![0.0f64; d.len()];
        data[d.index(4, 4, 4)] = 1.0;
        let impulse = ShapeMask::<f64>::new(d, data.clone()).unwrap();
        let taps = gaussian_kernel(3).unwrap();
        let smoothed = smooth_mask(&impulse, 3).unwrap();
        // Direct dense 3D convolution with the outer-product kernel.
        for (_, [x, y, z]) in d.iter() {
            let mut acc = 0.0;
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sx, sy, sz) = (x as isize + kx - 1, y as isize + ky - 1, z as isize + kz - 1);
                        if (0..9).contains(&sx) && (0..9).contains(&sy) && (0..9).contains(&sz) {
                            acc += taps[kx as usize]
                                * taps[ky as usize]
                                * taps[kz as usize]
                                * data[d.index(sx as usize, sy as usize, sz as usize)];
                        }
                    }
                }
            }
            assert!((smoothed.get(x, y, z) - acc).abs() < 1e-12);
        }
        assert!((smoothed.get(4, 4, 4) - taps[1].powi(3)).abs() < 1e-12);
        assert!((smoothed.get(5, 4, 4) - taps[2] * taps[1] * taps[1]).abs() < 1e-12);
    }

    #[test]
    fn library_round_trips_through_disk() {
        let grid = default_brush_grid(Dims::cube(16));
        let lib: ShapeLibrary<f32> = build_shape_library(5, &grid, 11).unwrap();
        assert_eq!(lib.len(), 5);
        assert_eq!(lib.params[1], grid[1]);
        let again: ShapeLibrary<f32> = build_shape_library(5, &grid, 11).unwrap();
        assert_eq!(lib, again);
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let loaded: ShapeLibrary<f32> = load_library(dir.path()).unwrap();
        assert_eq!(loaded, lib);
        let one: ShapeLibrary<f32> = build_shape_library(1, &grid, 11).unwrap();
        assert_eq!(one.len(), 1);
        assert!(build_shape_library::<f32>(0, &grid, 1).is_err());
        assert!(build_shape_library::<f32>(3, &[], 1).is_err());
    }
}
