//! Synthetic anomaly composition: foreign-patch texture, shape, placement,
//! interpolation factor and optional edge smoothing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_volume, write_json, write_volume};
use crate::num::Scalar;
use crate::patch_bank::{augment_patch, sample_patch_from_volume, ForeignPatch, PatchAugmentParams, PatchBank};
use crate::rng::{derive_seed, rng_from_seed, stream_rng};
use crate::shape::{
    augment_shape, gen_cuboid, gen_sphere, smooth_mask, AffineRanges, ShapeFamily, ShapeLibrary, ShapeMask,
};
use crate::volume::{foreground_mask, Dims, ForegroundMask, Preprocess, Volume3D};

/// Which shape families a generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeMode {
    Cuboid,
    Sphere,
    Brush,
    /// Uniform choice among cuboid, sphere and brush.
    Complex,
}

/// Edge treatment of generated anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Hard,
    Smoothed,
    /// Hard or smoothed with equal probability, per sample.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocationConfig {
    /// Minimum foreground fraction of the patch box when placement is
    /// restricted to foreground.
    pub foreground_threshold: f64,
    pub retries: usize,
}

impl Default for LocationConfig {
    fn default() -> Self {
        LocationConfig {
            foreground_threshold: 0.5,
            retries: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub shapes: ShapeMode,
    pub edges: EdgeMode,
    pub alpha_range: (f64, f64),
    pub kernel_sizes: Vec<usize>,
    pub foreground_only: bool,
    pub location: LocationConfig,
    pub affine: AffineRanges,
    pub patch_augment: PatchAugmentParams,
    /// Cuboid side lengths as a fraction of the canvas extent.
    pub cuboid_extent: (f64, f64),
    /// Sphere radius as a fraction of half the smallest canvas extent.
    pub sphere_radius: (f64, f64),
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            shapes: ShapeMode::Complex,
            edges: EdgeMode::Mixed,
            alpha_range: (0.3, 1.0),
            kernel_sizes: vec![3, 5, 7],
            foreground_only: false,
            location: LocationConfig::default(),
            affine: AffineRanges::default(),
            patch_augment: PatchAugmentParams::default(),
            cuboid_extent: (0.25, 1.0),
            sphere_radius: (0.25, 1.0),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("alpha_range", "need 0 <= min <= max <= 1"));
        }
        if self.kernel_sizes.is_empty() && self.edges != EdgeMode::Hard {
            return Err(Error::invalid("kernel_sizes", "must not be empty when smoothing"));
        }
        for (i, k) in self.kernel_sizes.iter().enumerate() {
            if ![3, 5, 7].contains(k) {
                return Err(Error::invalid(format!("kernel_sizes[{i}]"), "must be 3, 5 or 7"));
            }
        }
        let loc = &self.location;
        if !(0.0..=1.0).contains(&loc.foreground_threshold) {
            return Err(Error::invalid("location.foreground_threshold", "must be in [0, 1]"));
        }
        if loc.retries == 0 {
            return Err(Error::invalid("location.retries", "must be at least 1"));
        }
        for (name, (lo, hi)) in [
            ("cuboid_extent", self.cuboid_extent),
            ("sphere_radius", self.sphere_radius),
        ] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(name, "need 0 < min <= max <= 1"));
            }
        }
        self.affine.validate()?;
        self.patch_augment.validate()
    }
}

/// Provenance of one synthetic corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub shape_family: ShapeFamily,
    pub alpha: f64,
    pub corner: [usize; 3],
    pub patch_dims: [usize; 3],
    /// 0 for hard edges, otherwise the Gaussian kernel size.
    pub kernel_size: usize,
    pub seed: u64,
    pub foreground_restricted: bool,
}

/// Per-voxel interpolation factor on the image grid; the training target.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap<T>(pub Volume3D<T>);

impl<T: Scalar> AlphaMap<T> {
    pub fn volume(&self) -> &Volume3D<T> {
        &self.0
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    pub fn max(&self) -> T {
        self.0.data().iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample<T> {
    pub image: Volume3D<T>,
    pub label: AlphaMap<T>,
    pub record: AnomalyRecord,
}

/// Corner of a `patch_dims` box placed uniformly inside `image_dims`. With a
/// foreground mask, corners are redrawn until the box reaches the configured
/// foreground fraction.
pub fn sample_location<R: Rng + ?Sized>(
    image_dims: Dims,
    patch_dims: Dims,
    fg: Option<&ForegroundMask>,
    cfg: &LocationConfig,
    rng: &mut R,
) -> Result<[usize; 3]> {
    if !patch_dims.strictly_within(&image_dims) {
        return Err(Error::invalid(
            "patch_dims",
            format!(
                "{:?} must be strictly smaller than image {:?}",
                patch_dims.0, image_dims.0
            ),
        ));
    }
    if let Some(m) = fg {
        if m.dims() != image_dims {
            return Err(Error::DimsMismatch {
                expected: image_dims.0,
                found: m.dims().0,
            });
        }
    }
    let attempts = if fg.is_some() { cfg.retries.max(1) } else { 1 };
    for _ in 0..attempts {
        let mut corner = [0usize; 3];
        for a in 0..3 {
            corner[a] = rng.random_range(0..=image_dims.0[a] - patch_dims.0[a]);
        }
        match fg {
            None => return Ok(corner),
            Some(m) if m.fraction_in_box(corner, patch_dims) >= cfg.foreground_threshold => return Ok(corner),
            Some(_) => {}
        }
    }
    Err(Error::Location { attempts })
}

/// Blend `patch` into `x` at `corner`: `x' = x (1 - a) + x_fp a` with the
/// per-voxel factor `a = alpha * mask`. Voxels with `a = 0` are copied
/// unchanged; blended voxels are clamped to `[0, 1]`.
pub fn interpolate<T: Scalar>(
    x: &Volume3D<T>,
    patch: &ForeignPatch<T>,
    mask: &ShapeMask<T>,
    alpha: f64,
    corner: [usize; 3],
) -> Result<(Volume3D<T>, AlphaMap<T>)> {
    let pd = patch.dims();
    if mask.dims() != pd {
        return Err(Error::DimsMismatch {
            expected: pd.0,
            found: mask.dims().0,
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} outside [0, 1]")));
    }
    let id = x.dims();
    if (0..3).any(|a| corner[a] + pd.0[a] > id.0[a]) {
        return Err(Error::invalid(
            "corner",
            format!("patch {:?} at {:?} exceeds image {:?}", pd.0, corner, id.0),
        ));
    }
    let mut image = x.clone();
    let mut alpha_map = Volume3D::zeros(id).with_spacing(x.spacing())?;
    let a = T::of(alpha);
    for pz in 0..pd.0[2] {
        for py in 0..pd.0[1] {
            for px in 0..pd.0[0] {
                let w = mask.get(px, py, pz);
                let a_s = a * w;
                if a_s == T::zero() {
                    continue;
                }
                let (ix, iy, iz) = (corner[0] + px, corner[1] + py, corner[2] + pz);
                let orig = x.get(ix, iy, iz);
                let fp = patch.volume.get(px, py, pz);
                image.set(ix, iy, iz, (orig * (T::one() - a_s) + fp * a_s).clamp01());
                alpha_map.set(ix, iy, iz, a_s);
            }
        }
    }
    Ok((image, AlphaMap(alpha_map)))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draw a patch from `bank` and corrupt `x` with it. All randomness derives
/// from `seed`: stream 0 picks the bank slot, stream 1 drives
/// [`generate_with_patch`].
pub fn generate_sample<T: Scalar>(
    x: &Volume3D<T>,
    bank: &PatchBank<T>,
    library: &ShapeLibrary<T>,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<CorruptedSample<T>> {
    let slot = bank.draw_index(&mut stream_rng(seed, 0))?;
    generate_with_patch(x, &bank.patches()[slot], library, cfg, seed)
}

/// Texture augmentation, shape draw and augmentation, optional smoothing,
/// alpha draw, placement and interpolation for an already chosen patch.
pub fn generate_with_patch<T: Scalar>(
    x: &Volume3D<T>,
    patch: &ForeignPatch<T>,
    library: &ShapeLibrary<T>,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<CorruptedSample<T>> {
    cfg.validate()?;
    let rng = &mut stream_rng(seed, 1);
    let patch = augment_patch(patch, &cfg.patch_augment, rng);
    let canvas = patch.dims();

    let family = match cfg.shapes {
        ShapeMode::Cuboid => ShapeFamily::Cuboid,
        ShapeMode::Sphere => ShapeFamily::Sphere,
        ShapeMode::Brush => ShapeFamily::Brush,
        ShapeMode::Complex => *ShapeFamily::ALL.choose(rng).expect("non-empty"),
    };
    let base: ShapeMask<T> = match family {
        ShapeFamily::Cuboid => {
            let mut extent = [0.0; 3];
            let mut rotation = [0.0; 3];
            for a in 0..3 {
                let n = canvas.0[a] as f64;
                extent[a] = (uniform(rng, cfg.cuboid_extent) * n).clamp(1.0, n);
                rotation[a] = rng.random_range(0.0..std::f64::consts::TAU);
            }
            gen_cuboid(canvas, extent, rotation)?
        }
        ShapeFamily::Sphere => {
            let max = canvas.min_axis() as f64 / 2.0;
            if max < 1.0 {
                return Err(Error::invalid("patch_dims", "too small for a sphere"));
            }
            gen_sphere(canvas, (uniform(rng, cfg.sphere_radius) * max).clamp(1.0, max))?
        }
        ShapeFamily::Brush => {
            let shape = library
                .shapes
                .choose(rng)
                .ok_or_else(|| Error::invalid("library", "is empty"))?;
            if shape.dims() != canvas {
                return Err(Error::DimsMismatch {
                    expected: canvas.0,
                    found: shape.dims().0,
                });
            }
            shape.clone()
        }
    };
    let (shape, _) = augment_shape(&base, &cfg.affine, rng)?;

    let smooth = match cfg.edges {
        EdgeMode::Hard => false,
        EdgeMode::Smoothed => true,
        EdgeMode::Mixed => rng.random_bool(0.5),
    };
    let (shape, kernel_size) = if smooth {
        let k = *cfg.kernel_sizes.choose(rng).expect("validated non-empty");
        (smooth_mask(&shape, k)?, k)
    } else {
        (shape, 0)
    };

    let alpha = uniform(rng, cfg.alpha_range);
    let fg = cfg.foreground_only.then(|| foreground_mask(x));
    let corner = sample_location(x.dims(), canvas, fg.as_ref(), &cfg.location, rng)?;
    let (image, label) = interpolate(x, &patch, &shape, alpha, corner)?;
    Ok(CorruptedSample {
        image,
        label,
        record: AnomalyRecord {
            shape_family: family,
            alpha,
            corner,
            patch_dims: canvas.0,
            kernel_size,
            seed,
            foreground_restricted: cfg.foreground_only,
        },
    })
}

/// Settings for writing a synthetic training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub generation: GenerationConfig,
    pub patch_dims: Dims,
    pub bank_capacity: usize,
    pub preprocess: Preprocess,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generation: GenerationConfig::default(),
            patch_dims: Dims::cube(64),
            bank_capacity: 32,
            preprocess: Preprocess::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch_dims.validate("patch_dims")?;
        if self.bank_capacity == 0 {
            return Err(Error::invalid("bank_capacity", "must be at least 1"));
        }
        self.preprocess.validate().map_err(|e| e.within("preprocess"))?;
        self.generation.validate().map_err(|e| e.within("generation"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
    pub source: String,
    pub record: AnomalyRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub item: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct EmitReport {
    pub manifest: Vec<ManifestEntry>,
    pub errors: Vec<ItemError>,
}

pub const MANIFEST: &str = "manifest.json";

const BANK_SEED_INDEX: u64 = u64::MAX;
const WARMUP_SEED_BASE: u64 = 1 << 62;
const CHUNK: usize = 32;

/// Source identifier: the file stem.
pub fn source_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Write `count_per_volume` corrupted samples per readable source plus
/// `manifest.json`.
///
/// Samples are processed round-robin over the sources; sample `i` uses
/// `derive_seed(seed, i)`. The patch bank evolves sequentially (one draw,
/// then one insertion from the processed image, per sample) while the
/// corruption itself runs in parallel, so output is independent of the
/// thread count. Unreadable sources and failed samples are reported in
/// [`EmitReport::errors`] and skipped.
pub fn emit_dataset<T: Scalar>(
    sources: &[PathBuf],
    cfg: &DatasetConfig,
    library: &ShapeLibrary<T>,
    out_dir: &Path,
    count_per_volume: usize,
    seed: u64,
) -> Result<EmitReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("labels")).map_err(|e| Error::io(out_dir, e))?;
    let mut report = EmitReport::default();

    let mut volumes = Vec::new();
    for path in sources {
        match read_volume::<T>(path).and_then(|v| cfg.preprocess.apply(v)) {
            Ok(v) => volumes.push((source_id(path), v)),
            Err(e) => report.errors.push(ItemError {
                item: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }

    if count_per_volume > 0 && !volumes.is_empty() {
        let n = volumes.len();
        let mut bank = PatchBank::new(cfg.bank_capacity, derive_seed(seed, BANK_SEED_INDEX))?;
        for k in 0..cfg.bank_capacity {
            let (id, v) = &volumes[k % n];
            let mut rng = rng_from_seed(derive_seed(seed, WARMUP_SEED_BASE + k as u64));
            bank.insert(sample_patch_from_volume(v, cfg.patch_dims, id.clone(), &mut rng)?)?;
        }

        let total = n * count_per_volume;
        let mut start = 0;
        while start < total {
            let end = (start + CHUNK).min(total);
            let mut drawn = Vec::with_capacity(end - start);
            for i in start..end {
                let sample_seed = derive_seed(seed, i as u64);
                let slot = bank.draw_index(&mut stream_rng(sample_seed, 0))?;
                drawn.push(bank.patches()[slot].clone());
                let (id, v) = &volumes[i % n];
                let mut rng = stream_rng(sample_seed, 2);
                bank.insert(sample_patch_from_volume(v, cfg.patch_dims, id.clone(), &mut rng)?)?;
            }
            let results: Vec<Result<ManifestEntry>> = drawn
                .par_iter()
                .enumerate()
                .map(|(off, patch)| {
                    let i = start + off;
                    let (id, v) = &volumes[i % n];
                    let sample = generate_with_patch(v, patch, library, &cfg.generation, derive_seed(seed, i as u64))?;
                    let image_path = format!("images/sample_{i:05}.rvol");
                    let label_path = format!("labels/sample_{i:05}.rvol");
                    write_volume(&sample.image, out_dir.join(&image_path))?;
                    write_volume(sample.label.volume(), out_dir.join(&label_path))?;
                    Ok(ManifestEntry {
                        image_path,
                        label_path,
                        source: id.clone(),
                        record: sample.record,
                    })
                })
                .collect();
            for (off, r) in results.into_iter().enumerate() {
                match r {
                    Ok(entry) => report.manifest.push(entry),
                    Err(e) => report.errors.push(ItemError {
                        item: format!("sample {}", start + off),
                        message: e.to_string(),
                    }),
                }
            }
            start = end;
        }
    }

    write_json(&out_dir.join(MANIFEST), &report.manifest)?;
    Ok(report)
}
