//! Held-out validation anomalies: additive noise, uniform noise (each with
//! hard or smoothed edges), local deformations, reflections and shifts.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_json, write_volume};
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from_seed, unit_f64};
use crate::shape::{smooth_mask, ShapeMask};
use crate::volume::{Dims, Volume3D};

/// Weight above which a smoothed region counts as anomalous in the truth.
pub const TRUTH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationFamily {
    Healthy,
    AddNoise,
    AddNoiseSmooth,
    Deform,
    Reflect,
    Shift,
    UniformNoise,
    UniformNoiseSmooth,
}

impl ValidationFamily {
    pub const ALL: [ValidationFamily; 8] = [
        ValidationFamily::Healthy,
        ValidationFamily::AddNoise,
        ValidationFamily::AddNoiseSmooth,
        ValidationFamily::Deform,
        ValidationFamily::Reflect,
        ValidationFamily::Shift,
        ValidationFamily::UniformNoise,
        ValidationFamily::UniformNoiseSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValidationFamily::Healthy => "healthy",
            ValidationFamily::AddNoise => "add_noise",
            ValidationFamily::AddNoiseSmooth => "add_noise_smooth",
            ValidationFamily::Deform => "deform",
            ValidationFamily::Reflect => "reflect",
            ValidationFamily::Shift => "shift",
            ValidationFamily::UniformNoise => "uniform_noise",
            ValidationFamily::UniformNoiseSmooth => "uniform_noise_smooth",
        }
    }

    pub fn is_smoothed(self) -> bool {
        matches!(
            self,
            ValidationFamily::AddNoiseSmooth | ValidationFamily::UniformNoiseSmooth
        )
    }

    /// The hard-edged family a smoothed family mirrors; itself otherwise.
    pub fn hard_counterpart(self) -> ValidationFamily {
        match self {
            ValidationFamily::AddNoiseSmooth => ValidationFamily::AddNoise,
            ValidationFamily::UniformNoiseSmooth => ValidationFamily::UniformNoise,
            f => f,
        }
    }
}

impl fmt::Display for ValidationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ValidationFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ValidationFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("family", format!("unknown family {s:?}")))
    }
}

/// Anomaly placement: a binary mask over the box starting at `corner`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region<T> {
    pub mask: ShapeMask<T>,
    pub corner: [usize; 3],
}

impl<T: Scalar> Region<T> {
    /// Full axis-aligned box.
    pub fn cuboid(corner: [usize; 3], size: Dims) -> Self {
        Region {
            mask: ShapeMask::full(size),
            corner,
        }
    }

    fn check(&self, image: Dims) -> Result<()> {
        let d = self.mask.dims();
        if (0..3).any(|a| self.corner[a] + d.0[a] > image.0[a]) {
            return Err(Error::invalid(
                "region",
                format!("box {:?} at {:?} exceeds image {:?}", d.0, self.corner, image.0),
            ));
        }
        if self.mask.is_empty() {
            return Err(Error::invalid("region", "mask is empty"));
        }
        Ok(())
    }

    /// Visit every region voxel as `(local [x, y, z], image [x, y, z])`.
    fn for_each(&self, mut f: impl FnMut([usize; 3], [usize; 3])) {
        let d = self.mask.dims();
        for (_, l) in d.iter() {
            f(l, [l[0] + self.corner[0], l[1] + self.corner[1], l[2] + self.corner[2]]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCase<T> {
    pub image: Volume3D<T>,
    pub truth: Volume3D<T>,
    pub family: ValidationFamily,
    /// The anomaly left the image bitwise unchanged (symmetric content,
    /// saturated intensities).
    pub degenerate: bool,
    pub seed: u64,
}

fn finish<T: Scalar>(
    x: &Volume3D<T>,
    image: Volume3D<T>,
    truth: Volume3D<T>,
    family: ValidationFamily,
) -> ValidationCase<T> {
    let degenerate =
        family != ValidationFamily::Healthy && image.data().iter().zip(x.data()).all(|(a, b)| a.to_bits_eq(*b));
    ValidationCase {
        image,
        truth,
        family,
        degenerate,
        seed: 0,
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: T) -> bool {
        // Same value and same sign of zero.
        self == other && self.is_sign_negative() == other.is_sign_negative()
    }
}

/// Region weights, optionally Gaussian-smoothed, and the binary truth they
/// induce on the image grid. Smoothing runs on the region box grown by
/// half a kernel (within the image), so the ramp extends past the region.
/// Truth stays inside the region box.
fn weights_and_truth<T: Scalar>(
    x: &Volume3D<T>,
    region: &Region<T>,
    smooth_kernel: Option<usize>,
) -> Result<(Region<T>, Volume3D<T>)> {
    let w = match smooth_kernel {
        Some(k) => {
            let size = region.mask.dims().0;
            if size.iter().any(|&e| e < k) {
                return Err(Error::invalid(
                    "region",
                    format!("extent {size:?} is narrower than smoothing kernel {k}"),
                ));
            }
            let lo: [usize; 3] = std::array::from_fn(|a| region.corner[a].saturating_sub(k / 2));
            let hi: [usize; 3] = std::array::from_fn(|a| (region.corner[a] + size[a] + k / 2).min(x.dims().0[a]));
            let grown = Dims(std::array::from_fn(|a| hi[a] - lo[a]));
            let offset: [usize; 3] = std::array::from_fn(|a| region.corner[a] - lo[a]);
            let padded = ShapeMask::from_predicate(grown, |px, py, pz| {
                let l = [px, py, pz];
                (0..3).all(|a| l[a] >= offset[a] && l[a] < offset[a] + size[a])
                    && region.mask.get(px - offset[0], py - offset[1], pz - offset[2]) > T::zero()
            });
            Region {
                mask: smooth_mask(&padded, k)?,
                corner: lo,
            }
        }
        None => region.clone(),
    };
    let mut truth = Volume3D::zeros(x.dims()).with_spacing(x.spacing())?;
    let thr = T::of(TRUTH_THRESHOLD);
    let size = region.mask.dims().0;
    w.for_each(|l, g| {
        let in_box = (0..3).all(|a| g[a] >= region.corner[a] && g[a] < region.corner[a] + size[a]);
        if in_box && w.mask.get(l[0], l[1], l[2]) > thr {
            truth.set(g[0], g[1], g[2], T::one());
        }
    });
    Ok((w, truth))
}

fn binary_truth<T: Scalar>(x: &Volume3D<T>, region: &Region<T>) -> Result<Volume3D<T>> {
    Ok(weights_and_truth(x, region, None)?.1)
}

/// `x' = clamp(x + m * w)` inside the region, with `m = sign * magnitude`.
pub fn additive_noise<T: Scalar>(
    x: &Volume3D<T>,
    region: &Region<T>,
    signed_magnitude: f64,
    smooth_kernel: Option<usize>,
) -> Result<ValidationCase<T>> {
    region.check(x.dims())?;
    let m = signed_magnitude.abs();
    if !(m > 0.0 && m <= 0.5) {
        return Err(Error::invalid("magnitude", "must be in (0, 0.5]"));
    }
    let (w, truth) = weights_and_truth(x, region, smooth_kernel)?;
    let mut image = x.clone();
    w.for_each(|l, g| {
        let wv = w.mask.get(l[0], l[1], l[2]);
        if wv > T::zero() {
            let v = x.get(g[0], g[1], g[2]) + T::of(signed_magnitude) * wv;
            image.set(g[0], g[1], g[2], v.clamp01());
        }
    });
    let family = if smooth_kernel.is_some() {
        ValidationFamily::AddNoiseSmooth
    } else {
        ValidationFamily::AddNoise
    };
    Ok(finish(x, image, truth, family))
}

pub fn make_additive_noise<T: Scalar, R: Rng + ?Sized>(
    x: &Volume3D<T>,
    region: &Region<T>,
    magnitude: f64,
    smooth_kernel: Option<usize>,
    rng: &mut R,
) -> Result<ValidationCase<T>> {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    additive_noise(x, region, sign * magnitude, smooth_kernel)
}

/// `x' = (1 - w) x + w u` with `u ~ U[0, 1]` per voxel. The noise value
/// depends only on the drawn noise seed and the voxel position, so hard
/// and smoothed variants of one draw share their noise.
pub fn make_uniform_noise<T: Scalar, R: Rng + ?Sized>(
    x: &Volume3D<T>,
    region: &Region<T>,
    smooth_kernel: Option<usize>,
    rng: &mut R,
) -> Result<ValidationCase<T>> {
    region.check(x.dims())?;
    let (w, truth) = weights_and_truth(x, region, smooth_kernel)?;
    let noise_seed: u64 = rng.random();
    let mut image = x.clone();
    w.for_each(|l, g| {
        let u = T::of(unit_f64(noise_seed, x.dims().index(g[0], g[1], g[2]) as u64));
        let wv = w.mask.get(l[0], l[1], l[2]);
        if wv > T::zero() {
            let v = (T::one() - wv) * x.get(g[0], g[1], g[2]) + wv * u;
            image.set(g[0], g[1], g[2], v.clamp01());
        }
    });
    let family = if smooth_kernel.is_some() {
        ValidationFamily::UniformNoiseSmooth
    } else {
        ValidationFamily::UniformNoise
    };
    Ok(finish(x, image, truth, family))
}

/// Radial warp falloff, 1 at the center and 0 from `radius` outward.
pub fn deformation_falloff(distance: f64, radius: f64) -> f64 {
    if distance >= radius {
        0.0
    } else {
        let t = distance / radius;
        (1.0 - t * t).powi(2)
    }
}

/// Radial source/sink warp centered in the region. A voxel at offset `d`
/// from the center samples the original at `c + d (1 - s f(|d|))`, with
/// `f` from [`deformation_falloff`] and `radius` = half the smallest region
/// extent; positive `s` magnifies the center, negative shrinks it.
pub fn deformation<T: Scalar>(x: &Volume3D<T>, region: &Region<T>, signed_strength: f64) -> Result<ValidationCase<T>> {
    region.check(x.dims())?;
    let s = signed_strength.abs();
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::invalid("strength", "must be in (0, 1]"));
    }
    let d = region.mask.dims();
    let center = [
        region.corner[0] as f64 + (d.0[0] as f64 - 1.0) / 2.0,
        region.corner[1] as f64 + (d.0[1] as f64 - 1.0) / 2.0,
        region.corner[2] as f64 + (d.0[2] as f64 - 1.0) / 2.0,
    ];
    let radius = d.min_axis() as f64 / 2.0;
    let mut image = x.clone();
    region.for_each(|l, g| {
        if region.mask.get(l[0], l[1], l[2]) == T::zero() {
            return;
        }
        let off = [
            g[0] as f64 - center[0],
            g[1] as f64 - center[1],
            g[2] as f64 - center[2],
        ];
        let dist = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
        let k = 1.0 - signed_strength * deformation_falloff(dist, radius);
        let q = [center[0] + off[0] * k, center[1] + off[1] * k, center[2] + off[2] * k];
        image.set(g[0], g[1], g[2], x.sample_trilinear(q));
    });
    let truth = binary_truth(x, region)?;
    Ok(finish(x, image, truth, ValidationFamily::Deform))
}

pub fn make_deformation<T: Scalar, R: Rng + ?Sized>(
    x: &Volume3D<T>,
    region: &Region<T>,
    strength: f64,
    rng: &mut R,
) -> Result<ValidationCase<T>> {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    deformation(x, region, sign * strength)
}

/// Mirror the region's bounding box along `axis`, composited under the mask.
pub fn reflection<T: Scalar>(x: &Volume3D<T>, region: &Region<T>, axis: usize) -> Result<ValidationCase<T>> {
    region.check(x.dims())?;
    if axis > 2 {
        return Err(Error::invalid("axis", "must be 0, 1 or 2"));
    }
    let d = region.mask.dims();
    let mut image = x.clone();
    region.for_each(|l, g| {
        if region.mask.get(l[0], l[1], l[2]) == T::zero() {
            return;
        }
        let mut src = g;
        src[axis] = region.corner[axis] + (d.0[axis] - 1 - l[axis]);
        image.set(g[0], g[1], g[2], x.get(src[0], src[1], src[2]));
    });
    let truth = binary_truth(x, region)?;
    Ok(finish(x, image, truth, ValidationFamily::Reflect))
}

pub fn make_reflection<T: Scalar, R: Rng + ?Sized>(
    x: &Volume3D<T>,
    region: &Region<T>,
    rng: &mut R,
) -> Result<ValidationCase<T>> {
    reflection(x, region, rng.random_range(0..3))
}

/// Translate region contents by `offset`: `x'(p) = x(p - offset)` under the
/// mask, reading the original image with edge clamping.
pub fn make_shift<T: Scalar>(x: &Volume3D<T>, region: &Region<T>, offset: [isize; 3]) -> Result<ValidationCase<T>> {
    region.check(x.dims())?;
    if offset == [0, 0, 0] {
        return Err(Error::invalid("offset", "must be non-zero on at least one axis"));
    }
    let dims = x.dims();
    let mut image = x.clone();
    region.for_each(|l, g| {
        if region.mask.get(l[0], l[1], l[2]) == T::zero() {
            return;
        }
        let mut src = [0usize; 3];
        for a in 0..3 {
            src[a] = (g[a] as isize - offset[a]).clamp(0, dims.0[a] as isize - 1) as usize;
        }
        image.set(g[0], g[1], g[2], x.get(src[0], src[1], src[2]));
    });
    let truth = binary_truth(x, region)?;
    Ok(finish(x, image, truth, ValidationFamily::Shift))
}

/// Number of cases per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyCounts {
    pub healthy: usize,
    pub add_noise: usize,
    pub add_noise_smooth: usize,
    pub deform: usize,
    pub reflect: usize,
    pub shift: usize,
    pub uniform_noise: usize,
    pub uniform_noise_smooth: usize,
}

impl Default for FamilyCounts {
    fn default() -> Self {
        FamilyCounts {
            healthy: 50,
            add_noise: 30,
            add_noise_smooth: 30,
            deform: 30,
            reflect: 30,
            shift: 30,
            uniform_noise: 30,
            uniform_noise_smooth: 30,
        }
    }
}

impl FamilyCounts {
    pub const ZERO: FamilyCounts = FamilyCounts {
        healthy: 0,
        add_noise: 0,
        add_noise_smooth: 0,
        deform: 0,
        reflect: 0,
        shift: 0,
        uniform_noise: 0,
        uniform_noise_smooth: 0,
    };

    pub fn get(&self, f: ValidationFamily) -> usize {
        match f {
            ValidationFamily::Healthy => self.healthy,
            ValidationFamily::AddNoise => self.add_noise,
            ValidationFamily::AddNoiseSmooth => self.add_noise_smooth,
            ValidationFamily::Deform => self.deform,
            ValidationFamily::Reflect => self.reflect,
            ValidationFamily::Shift => self.shift,
            ValidationFamily::UniformNoise => self.uniform_noise,
            ValidationFamily::UniformNoiseSmooth => self.uniform_noise_smooth,
        }
    }

    pub fn set(&mut self, f: ValidationFamily, n: usize) {
        let slot = match f {
            ValidationFamily::Healthy => &mut self.healthy,
            ValidationFamily::AddNoise => &mut self.add_noise,
            ValidationFamily::AddNoiseSmooth => &mut self.add_noise_smooth,
            ValidationFamily::Deform => &mut self.deform,
            ValidationFamily::Reflect => &mut self.reflect,
            ValidationFamily::Shift => &mut self.shift,
            ValidationFamily::UniformNoise => &mut self.uniform_noise,
            ValidationFamily::UniformNoiseSmooth => &mut self.uniform_noise_smooth,
        };
        *slot = n;
    }

    /// Keep only the listed families.
    pub fn only(&self, families: &[ValidationFamily]) -> FamilyCounts {
        let mut out = FamilyCounts::ZERO;
        for &f in families {
            out.set(f, self.get(f));
        }
        out
    }

    pub fn total(&self) -> usize {
        ValidationFamily::ALL.iter().map(|&f| self.get(f)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSetSpec {
    pub counts: FamilyCounts,
    /// Set from the run seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Region side length range in voxels, clamped to the image.
    pub region_size: (usize, usize),
    pub magnitude_range: (f64, f64),
    pub strength_range: (f64, f64),
    pub kernel_sizes: Vec<usize>,
}

impl Default for ValidationSetSpec {
    fn default() -> Self {
        ValidationSetSpec {
            counts: FamilyCounts::default(),
            seed: 0,
            region_size: (16, 64),
            magnitude_range: (0.1, 0.5),
            strength_range: (0.3, 1.0),
            kernel_sizes: vec![3, 5, 7],
        }
    }
}

impl ValidationSetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.region_size;
        if !(lo >= 1 && lo <= hi) {
            return Err(Error::invalid("region_size", "need 1 <= min <= max"));
        }
        let (lo, hi) = self.magnitude_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::invalid("magnitude_range", "need 0 < min <= max <= 0.5"));
        }
        let (lo, hi) = self.strength_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("strength_range", "need 0 < min <= max <= 1"));
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::invalid("kernel_sizes", "must not be empty"));
        }
        if let Some(&k) = self.kernel_sizes.iter().max() {
            if self.region_size.0 < k {
                return Err(Error::invalid(
                    "region_size",
                    format!("minimum must be at least the largest kernel ({k})"),
                ));
            }
        }
        for (i, k) in self.kernel_sizes.iter().enumerate() {
            if ![3, 5, 7].contains(k) {
                return Err(Error::invalid(format!("kernel_sizes[{i}]"), "must be 3, 5 or 7"));
            }
        }
        Ok(())
    }

    /// Family of every case, in manifest order.
    pub fn families(&self) -> Vec<ValidationFamily> {
        ValidationFamily::ALL
            .iter()
            .flat_map(|&f| std::iter::repeat_n(f, self.counts.get(f)))
            .collect()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random cuboid region that fits in `image`.
pub fn random_region<T: Scalar, R: Rng + ?Sized>(image: Dims, size: (usize, usize), rng: &mut R) -> Region<T> {
    let mut ext = [0usize; 3];
    let mut corner = [0usize; 3];
    for a in 0..3 {
        let hi = size.1.min(image.0[a]).max(1);
        let lo = size.0.min(hi).max(1);
        ext[a] = rng.random_range(lo..=hi);
        corner[a] = rng.random_range(0..=image.0[a] - ext[a]);
    }
    Region::cuboid(corner, Dims(ext))
}

/// Build one case of `family` from `x`, fully determined by `seed`.
pub fn make_case<T: Scalar>(
    x: &Volume3D<T>,
    family: ValidationFamily,
    spec: &ValidationSetSpec,
    seed: u64,
) -> Result<ValidationCase<T>> {
    let rng = &mut rng_from_seed(seed);
    let region = random_region::<T, _>(x.dims(), spec.region_size, rng);
    // Drawn for every family so hard and smoothed cases stay in step.
    let kernel = *spec.kernel_sizes.choose(rng).expect("validated");
    let mut case = match family {
        ValidationFamily::Healthy => ValidationCase {
            image: x.clone(),
            truth: Volume3D::zeros(x.dims()).with_spacing(x.spacing())?,
            family,
            degenerate: false,
            seed,
        },
        ValidationFamily::AddNoise | ValidationFamily::AddNoiseSmooth => {
            let k = family.is_smoothed().then_some(kernel);
            let m = uniform(rng, spec.magnitude_range);
            make_additive_noise(x, &region, m, k, rng)?
        }
        ValidationFamily::UniformNoise | ValidationFamily::UniformNoiseSmooth => {
            let k = family.is_smoothed().then_some(kernel);
            make_uniform_noise(x, &region, k, rng)?
        }
        ValidationFamily::Deform => {
            let s = uniform(rng, spec.strength_range);
            make_deformation(x, &region, s, rng)?
        }
        ValidationFamily::Reflect => make_reflection(x, &region, rng)?,
        ValidationFamily::Shift => {
            let ext = region.mask.dims();
            let mut offset = [0isize; 3];
            for (a, o) in offset.iter_mut().enumerate() {
                let max = (ext.0[a] / 4).max(1) as i64;
                *o = rng.random_range(-max..=max) as isize;
            }
            if offset == [0, 0, 0] {
                let a = rng.random_range(0..3);
                let max = (ext.0[a] / 4).max(1) as i64;
                let sign = if rng.random_bool(0.5) { 1 } else { -1 };
                offset[a] = (rng.random_range(1..=max) * sign) as isize;
            }
            make_shift(x, &region, offset)?
        }
    };
    case.seed = seed;
    Ok(case)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub image_path: String,
    pub truth_path: String,
    pub family: ValidationFamily,
    pub degenerate: bool,
    pub seed: u64,
}

pub const VALIDATION_MANIFEST: &str = "validation_manifest.json";

/// Build the validation set from held-out volumes and write it under
/// `out_dir`: `images/case_NNNN.rvol`, `truth/case_NNNN.rvol` and
/// `validation_manifest.json`.
///
/// The `j`-th case of a family uses source `j % len` and a seed derived
/// from `(spec.seed, family, j)`, where smoothed families take the seed of
/// their hard counterpart. Each smoothed case therefore repeats the region,
/// magnitude and noise of the matching hard case and differs only in its
/// edges.
pub fn build_validation_set<T: Scalar>(
    volumes: &[Volume3D<T>],
    spec: &ValidationSetSpec,
    out_dir: &Path,
) -> Result<Vec<ValidationEntry>> {
    spec.validate()?;
    let families = spec.families();
    if !families.is_empty() && volumes.is_empty() {
        return Err(Error::invalid(
            "volumes",
            "no held-out volumes for a non-empty validation set",
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ranked: Vec<(ValidationFamily, usize)> = families
        .iter()
        .scan(std::collections::HashMap::new(), |seen, &f| {
            let r = seen.entry(f).or_insert(0usize);
            *r += 1;
            Some((f, *r - 1))
        })
        .collect();
    let entries = ranked
        .par_iter()
        .enumerate()
        .map(|(i, &(family, rank))| {
            let group = family.hard_counterpart() as u64;
            let seed = derive_seed(derive_seed(spec.seed, group), rank as u64);
            let case = make_case(&volumes[rank % volumes.len()], family, spec, seed)?;
            let image_path = format!("images/case_{i:04}.rvol");
            let truth_path = format!("truth/case_{i:04}.rvol");
            write_volume(&case.image, out_dir.join(&image_path))?;
            write_volume(&case.truth, out_dir.join(&truth_path))?;
            Ok(ValidationEntry {
                image_path,
                truth_path,
                family,
                degenerate: case.degenerate,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out_dir.join(VALIDATION_MANIFEST), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    type V = Volume3D<f32>;

    fn textured(d: Dims) -> V {
        Volume3D::from_fn(d, |x, y, z| 0.2 + 0.6 * (((x * 7 + y * 3 + z * 5) % 11) as f32 / 10.0))
    }

    #[test]
    fn saturated_additive_noise_is_degenerate_but_labelled() {
        let x = V::filled(Dims::cube(8), 1.0);
        let r = Region::cuboid([2, 2, 2], Dims::cube(3));
        let c = additive_noise(&x, &r, 0.5, None).unwrap();
        assert_eq!(c.image, x);
        assert!(c.degenerate);
        assert_eq!(c.truth.data().iter().filter(|&&v| v == 1.0).count(), 27);
    }

    #[test]
    fn hard_additive_truth_is_mask() {
        let x = textured(Dims::cube(10));
        let r = Region::cuboid([1, 2, 3], Dims::new(4, 3, 5));
        let c = make_additive_noise(&x, &r, 0.3, None, &mut rng_from_seed(1)).unwrap();
        for (i, [px, py, pz]) in x.dims().iter() {
            let inside = (1..5).contains(&px) && (2..5).contains(&py) && (3..8).contains(&pz);
            assert_eq!(c.truth.data()[i], if inside { 1.0 } else { 0.0 });
            if !inside {
                assert_eq!(c.image.data()[i], x.data()[i]);
            }
        }
        assert!(!c.degenerate);
        assert!(additive_noise(&x, &r, 0.0, None).is_err());
        assert!(additive_noise(&x, &r, 0.3, Some(5)).is_err());
        assert!(additive_noise(&x, &r, 0.3, Some(3)).is_ok());
        assert!(additive_noise(&x, &r, 0.6, None).is_err());
    }

    #[test]
    fn smoothed_truth_is_inside_region() {
        let x = textured(Dims::cube(16));
        let r = Region::cuboid([3, 3, 3], Dims::cube(9));
        let c = make_additive_noise(&x, &r, 0.4, Some(7), &mut rng_from_seed(2)).unwrap();
        assert_eq!(c.family, ValidationFamily::AddNoiseSmooth);
        let n = c.truth.data().iter().filter(|&&v| v == 1.0).count();
        assert!(n > 0 && n < 9 * 9 * 9);
        for (i, p) in x.dims().iter() {
            if c.truth.data()[i] == 1.0 {
                assert!(p.iter().all(|&v| (3..12).contains(&v)));
            }
        }
    }

    #[test]
    fn uniform_noise_examples() {
        let x = textured(Dims::cube(8));
        let r = Region::cuboid([0, 0, 0], Dims::cube(1));
        let c = make_uniform_noise(&x, &r, None, &mut rng_from_seed(3)).unwrap();
        assert_eq!(c.truth.data().iter().filter(|&&v| v == 1.0).count(), 1);

        // Full weight: region values are exactly the drawn uniforms.
        let r = Region::cuboid([2, 2, 2], Dims::cube(3));
        let c = make_uniform_noise(&x, &r, None, &mut rng_from_seed(4)).unwrap();
        let noise_seed: u64 = rng_from_seed(4).random();
        for z in 2..5 {
            for y in 2..5 {
                for xx in 2..5 {
                    let u = unit_f64(noise_seed, x.dims().index(xx, y, z) as u64) as f32;
                    assert_eq!(c.image.get(xx, y, z), u);
                }
            }
        }
        let again = make_uniform_noise(&x, &r, None, &mut rng_from_seed(4)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn deformation_examples() {
        let d = Dims::cube(20);
        let c = V::filled(d, 0.4);
        let r = Region::cuboid([4, 4, 4], Dims::cube(11));
        assert_eq!(deformation(&c, &r, 0.8).unwrap().image, c);

        let ramp = Volume3D::<f64>::from_fn(d, |x, _, _| 0.1 + 0.04 * x as f64);
        let rr = Region::<f64>::cuboid([4, 4, 4], Dims::cube(11));
        let tiny = deformation(&ramp, &rr, 1e-12).unwrap();
        for (a, b) in tiny.image.data().iter().zip(ramp.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        // Ramp evaluated analytically at the warped coordinate. Region
        // center is (9, 9, 9), radius 5.5.
        let out = deformation(&ramp, &rr, 0.5).unwrap();
        let p = [11.0f64, 9.0, 9.0];
        let dist = 2.0f64;
        let f = (1.0 - (dist / 5.5).powi(2)).powi(2);
        let qx = 9.0 + (p[0] - 9.0) * (1.0 - 0.5 * f);
        let expected = 0.1 + 0.04 * qx;
        assert!((out.image.get(11, 9, 9) - expected).abs() < 1e-12);
        assert!(out.image.get(11, 9, 9) < ramp.get(11, 9, 9));
        let out = deformation(&ramp, &rr, -0.5).unwrap();
        assert!(out.image.get(11, 9, 9) > ramp.get(11, 9, 9));
        assert_eq!(out.family, ValidationFamily::Deform);
    }

    #[test]
    fn reflection_examples() {
        let x = textured(Dims::cube(10));
        let r = Region::cuboid([1, 2, 3], Dims::new(5, 4, 3));
        for axis in 0..3 {
            let once = reflection(&x, &r, axis).unwrap();
            let twice = reflection(&once.image, &r, axis).unwrap();
            assert_eq!(twice.image, x);
        }
        let sym = V::filled(Dims::cube(6), 0.5);
        let c = reflection(&sym, &Region::cuboid([1, 1, 1], Dims::cube(3)), 0).unwrap();
        assert!(c.degenerate);
        assert!(c.truth.data().contains(&1.0));

        let mut bar = V::zeros(Dims::new(4, 1, 1));
        bar.set(1, 0, 0, 0.2);
        bar.set(2, 0, 0, 0.9);
        let c = reflection(&bar, &Region::cuboid([1, 0, 0], Dims::new(2, 1, 1)), 0).unwrap();
        assert_eq!(c.image.data(), &[0.0, 0.9, 0.2, 0.0]);
    }

    #[test]
    fn shift_examples() {
        let x = textured(Dims::cube(8));
        let r = Region::cuboid([2, 2, 2], Dims::cube(4));
        assert!(make_shift(&x, &r, [0, 0, 0]).is_err());
        let c = V::filled(Dims::cube(8), 0.3);
        assert!(make_shift(&c, &r, [1, -2, 0]).unwrap().degenerate);

        // Step edge at x = 8 inside a 4..16 region, shifted by +2.
        let d = Dims::new(20, 3, 3);
        let step = V::from_fn(d, |x, _, _| if x >= 8 { 1.0 } else { 0.0 });
        let out = make_shift(&step, &Region::cuboid([4, 0, 0], Dims::new(12, 3, 3)), [2, 0, 0]).unwrap();
        for xx in 0..20 {
            // Direct index arithmetic: inside the region read from x - 2.
            let src = if (4..16).contains(&xx) { xx - 2 } else { xx };
            let expected = if src >= 8 { 1.0 } else { 0.0 };
            assert_eq!(out.image.get(xx, 1, 1), expected, "x = {xx}");
        }
        let first_one = (0..20).find(|&xx| out.image.get(xx, 1, 1) == 1.0).unwrap();
        assert_eq!(first_one, 10);
    }

    #[test]
    fn default_spec_matches_table_composition() {
        let spec = ValidationSetSpec::default();
        assert_eq!(spec.counts.total(), 260);
        assert_eq!(spec.counts.healthy, 50);
        let fams = spec.families();
        assert_eq!(fams.len(), 260);
        for f in ValidationFamily::ALL.iter().skip(1) {
            assert_eq!(fams.iter().filter(|&&g| g == *f).count(), 30);
        }
        let only = spec.counts.only(&[ValidationFamily::Healthy]);
        assert_eq!(only.total(), 50);
    }

    #[test]
    fn family_names_round_trip() {
        for f in ValidationFamily::ALL {
            assert_eq!(f.name().parse::<ValidationFamily>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
        assert!("nope".parse::<ValidationFamily>().is_err());
    }

    #[test]
    fn small_set_builds_and_is_reproducible() {
        let vols = vec![textured(Dims::cube(24)), textured(Dims::new(24, 20, 22))];
        let spec = ValidationSetSpec {
            counts: FamilyCounts {
                healthy: 2,
                ..FamilyCounts::ZERO
            },
            region_size: (7, 10),
            ..ValidationSetSpec::default()
        };
        let mut spec = spec;
        for f in ValidationFamily::ALL.iter().skip(1) {
            spec.counts.set(*f, 1);
        }
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = build_validation_set(&vols, &spec, a.path()).unwrap();
        let eb = build_validation_set(&vols, &spec, b.path()).unwrap();
        assert_eq!(ea.len(), 9);
        assert_eq!(ea, eb);
        for e in &ea {
            let ia = fs::read(a.path().join(&e.image_path)).unwrap();
            let ib = fs::read(b.path().join(&e.image_path)).unwrap();
            assert_eq!(ia, ib);
            let truth: V = crate::io::read_volume(a.path().join(&e.truth_path)).unwrap();
            let pos = truth.data().iter().filter(|&&v| v == 1.0).count();
            assert!(truth.data().iter().all(|&v| v == 0.0 || v == 1.0));
            if e.family == ValidationFamily::Healthy {
                assert_eq!(pos, 0);
            } else {
                assert!(pos > 0);
            }
        }
        let empty = ValidationSetSpec {
            counts: FamilyCounts::ZERO,
            ..ValidationSetSpec::default()
        };
        assert!(build_validation_set::<f32>(&[], &empty, a.path()).unwrap().is_empty());
        assert!(build_validation_set::<f32>(&[], &spec, a.path()).is_err());
    }

    #[test]
    fn smoothed_cases_mirror_their_hard_counterpart() {
        let x = textured(Dims::cube(32));
        let spec = ValidationSetSpec {
            region_size: (16, 20),
            ..ValidationSetSpec::default()
        };
        for (hard, smooth) in [
            (ValidationFamily::AddNoise, ValidationFamily::AddNoiseSmooth),
            (ValidationFamily::UniformNoise, ValidationFamily::UniformNoiseSmooth),
        ] {
            let h = make_case(&x, hard, &spec, 77).unwrap();
            let s = make_case(&x, smooth, &spec, 77).unwrap();
            let box_of = |t: &V| {
                let mut lo = [usize::MAX; 3];
                let mut hi = [0; 3];
                for (i, p) in t.dims().iter() {
                    if t.data()[i] == 1.0 {
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                }
                (lo, hi)
            };
            let (lo, hi) = box_of(&h.truth);
            for i in 0..x.dims().len() {
                if s.truth.data()[i] == 1.0 {
                    assert_eq!(h.truth.data()[i], 1.0);
                }
            }
            let c: [usize; 3] = std::array::from_fn(|a| (lo[a] + hi[a]) / 2);
            let (a, b) = (h.image.get(c[0], c[1], c[2]), s.image.get(c[0], c[1], c[2]));
            assert!((a - b).abs() < 1e-5, "{hard}: {a} vs {b}");
            assert_ne!(h.image, s.image);
        }
    }
}
