//! Memory bank of foreign texture patches with streaming replacement.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::io::{read_json, read_volume, write_json, write_volume};
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from_seed};
use crate::volume::{Dims, Volume3D};

/// Texture sub-volume cut from a training image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForeignPatch<T> {
    pub volume: Volume3D<T>,
    pub source_id: String,
}

impl<T: Scalar> ForeignPatch<T> {
    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }

    pub fn data(&self) -> &[T] {
        self.volume.data()
    }
}

/// Uniformly placed sub-volume of `v`. The patch must be strictly smaller
/// than the volume on every axis.
pub fn sample_patch_from_volume<T: Scalar, R: Rng + ?Sized>(
    v: &Volume3D<T>,
    patch_dims: Dims,
    source_id: impl Into<String>,
    rng: &mut R,
) -> Result<ForeignPatch<T>> {
    patch_dims.validate("patch_dims")?;
    if !patch_dims.strictly_within(&v.dims()) {
        return Err(Error::invalid(
            "patch_dims",
            format!(
                "{:?} must be strictly smaller than volume {:?}",
                patch_dims.0,
                v.dims().0
            ),
        ));
    }
    let mut corner = [0usize; 3];
    for a in 0..3 {
        corner[a] = rng.random_range(0..=v.dims().0[a] - patch_dims.0[a]);
    }
    Ok(ForeignPatch {
        volume: v.crop(corner, patch_dims)?,
        source_id: source_id.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended(usize),
    Replaced(usize),
}

/// Fixed-capacity patch pool. Once full, each insertion evicts a uniformly
/// random slot; the slot for insertion `n` is drawn from
/// `derive_seed(seed, n)`, so a bank is resumable from `(seed, inserts)`.
#[derive(Debug, Clone)]
pub struct PatchBank<T> {
    capacity: usize,
    patches: Vec<ForeignPatch<T>>,
    seed: u64,
    inserts: u64,
}

impl<T: Scalar> PatchBank<T> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("bank.capacity", "must be at least 1"));
        }
        Ok(PatchBank {
            capacity,
            patches: Vec::with_capacity(capacity),
            seed,
            inserts: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.patches.len() == self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inserts(&self) -> u64 {
        self.inserts
    }

    pub fn patches(&self) -> &[ForeignPatch<T>] {
        &self.patches
    }

    pub fn patch_dims(&self) -> Option<Dims> {
        self.patches.first().map(|p| p.dims())
    }

    pub fn insert(&mut self, p: ForeignPatch<T>) -> Result<InsertOutcome> {
        if let Some(d) = self.patch_dims() {
            if d != p.dims() {
                return Err(Error::DimsMismatch {
                    expected: d.0,
                    found: p.dims().0,
                });
            }
        }
        let n = self.inserts;
        self.inserts += 1;
        if self.patches.len() < self.capacity {
            self.patches.push(p);
            return Ok(InsertOutcome::Appended(self.patches.len() - 1));
        }
        let slot = rng_from_seed(derive_seed(self.seed, n)).random_range(0..self.capacity);
        self.patches[slot] = p;
        Ok(InsertOutcome::Replaced(slot))
    }

    /// Uniformly chosen slot index.
    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.patches.is_empty() {
            return Err(Error::invalid("bank", "is empty"));
        }
        Ok(rng.random_range(0..self.patches.len()))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&ForeignPatch<T>> {
        let i = self.draw_index(rng)?;
        Ok(&self.patches[i])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankIndex {
    pub capacity: usize,
    pub seed: u64,
    pub inserts: u64,
    pub entries: Vec<BankEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub file: String,
    pub source_id: String,
}

pub const BANK_INDEX: &str = "bank.json";

pub fn save_bank<T: Scalar>(bank: &PatchBank<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(bank.len());
    for (i, p) in bank.patches.iter().enumerate() {
        let file = format!("patch_{i:04}.rvol");
        write_volume(&p.volume, dir.join(&file))?;
        entries.push(BankEntry {
            file,
            source_id: p.source_id.clone(),
        });
    }
    write_json(
        &dir.join(BANK_INDEX),
        &BankIndex {
            capacity: bank.capacity,
            seed: bank.seed,
            inserts: bank.inserts,
            entries,
        },
    )
}

pub fn load_bank<T: Scalar>(dir: &Path) -> Result<PatchBank<T>> {
    let index: BankIndex = read_json(&dir.join(BANK_INDEX))?;
    let mut bank = PatchBank::new(index.capacity, index.seed)?;
    if index.entries.len() > index.capacity {
        return Err(Error::invalid("bank.entries", "more entries than capacity"));
    }
    for e in &index.entries {
        bank.patches.push(ForeignPatch {
            volume: read_volume(dir.join(&e.file))?,
            source_id: e.source_id.clone(),
        });
    }
    bank.inserts = index.inserts;
    Ok(bank)
}

/// Ranges for texture augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchAugmentParams {
    /// Noise standard deviation is drawn from `U[0, max_noise_sigma]`.
    pub max_noise_sigma: f64,
    /// Intensity shift is drawn from `U[-max_shift, max_shift]`.
    pub max_shift: f64,
    /// Probability of an extra small-angle rotation.
    pub small_angle_probability: f64,
    /// Bound of each small rotation angle, degrees.
    pub max_small_angle_deg: f64,
}

impl Default for PatchAugmentParams {
    fn default() -> Self {
        PatchAugmentParams {
            max_noise_sigma: 0.05,
            max_shift: 0.1,
            small_angle_probability: 0.5,
            max_small_angle_deg: 15.0,
        }
    }
}

impl PatchAugmentParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("patch_augment.max_noise_sigma", self.max_noise_sigma >= 0.0),
            ("patch_augment.max_shift", self.max_shift >= 0.0),
            (
                "patch_augment.small_angle_probability",
                (0.0..=1.0).contains(&self.small_angle_probability),
            ),
            ("patch_augment.max_small_angle_deg", self.max_small_angle_deg >= 0.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::invalid(field, "out of range"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PatchAugmentDraw {
        let noise_sigma = rng.random::<f64>() * self.max_noise_sigma;
        let shift = (rng.random::<f64>() * 2.0 - 1.0) * self.max_shift;
        let quarter_turns = [
            rng.random_range(0..4u8),
            rng.random_range(0..4u8),
            rng.random_range(0..4u8),
        ];
        let mut small_angles = [0.0; 3];
        if rng.random::<f64>() < self.small_angle_probability {
            let max = self.max_small_angle_deg.to_radians();
            for a in &mut small_angles {
                *a = (rng.random::<f64>() * 2.0 - 1.0) * max;
            }
        }
        PatchAugmentDraw {
            noise_sigma,
            shift,
            quarter_turns,
            small_angles,
        }
    }
}

/// One concrete texture augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchAugmentDraw {
    pub noise_sigma: f64,
    pub shift: f64,
    /// Quarter turns about the x, y and z axes. A turn about an axis whose
    /// perpendicular extents differ is only applied in pairs (180 degrees).
    pub quarter_turns: [u8; 3],
    /// Extra rotation angles in radians; all zero means none.
    pub small_angles: Vec3,
}

impl PatchAugmentDraw {
    pub const IDENTITY: PatchAugmentDraw = PatchAugmentDraw {
        noise_sigma: 0.0,
        shift: 0.0,
        quarter_turns: [0; 3],
        small_angles: [0.0; 3],
    };
}

/// Rotate by 90 degrees (or 180 when `half_turn`) about `axis`.
fn rotate_quarter<T: Scalar>(v: &Volume3D<T>, axis: usize, half_turn: bool) -> Volume3D<T> {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    let d = v.dims().0;
    Volume3D::from_fn(v.dims(), |x, y, z| {
        let p = [x, y, z];
        let mut src = p;
        if half_turn {
            src[b] = d[b] - 1 - p[b];
            src[c] = d[c] - 1 - p[c];
        } else {
            src[b] = d[c] - 1 - p[c];
            src[c] = p[b];
        }
        v.get(src[0], src[1], src[2])
    })
}

fn rotate_small<T: Scalar>(v: &Volume3D<T>, angles: Vec3) -> Volume3D<T> {
    let inverse = Mat3::from_euler(angles).transpose();
    let d = v.dims().0;
    let center = [
        (d[0] as f64 - 1.0) / 2.0,
        (d[1] as f64 - 1.0) / 2.0,
        (d[2] as f64 - 1.0) / 2.0,
    ];
    Volume3D::from_fn(v.dims(), |x, y, z| {
        let q = inverse.apply(geometry::sub([x as f64, y as f64, z as f64], center));
        v.sample_trilinear(geometry::add(center, q))
    })
}

/// Apply `draw` in order: additive Gaussian noise, intensity shift,
/// rotation, then clamp to `[0, 1]`. `rng` feeds the noise only.
pub fn apply_patch_augment<T: Scalar, R: Rng + ?Sized>(
    p: &ForeignPatch<T>,
    draw: &PatchAugmentDraw,
    rng: &mut R,
) -> ForeignPatch<T> {
    let mut data: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
    if draw.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, draw.noise_sigma).expect("finite sigma");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    let mut vol = Volume3D::from_vec(p.dims(), data.into_iter().map(|v| T::of(v + draw.shift)).collect());
    let d = p.dims().0;
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let turns = if d[b] == d[c] {
            draw.quarter_turns[axis] % 4
        } else {
            (draw.quarter_turns[axis] % 4) & !1
        };
        match turns {
            0 => {}
            1 => vol = rotate_quarter(&vol, axis, false),
            2 => vol = rotate_quarter(&vol, axis, true),
            _ => vol = rotate_quarter(&rotate_quarter(&vol, axis, true), axis, false),
        }
    }
    if draw.small_angles.iter().any(|a| *a != 0.0) {
        vol = rotate_small(&vol, draw.small_angles);
    }
    let vol = vol
        .map(|v| v.clamp01())
        .with_spacing(p.volume.spacing())
        .expect("spacing already valid");
    ForeignPatch {
        volume: vol,
        source_id: p.source_id.clone(),
    }
}

pub fn augment_patch<T: Scalar, R: Rng + ?Sized>(
    p: &ForeignPatch<T>,
    params: &PatchAugmentParams,
    rng: &mut R,
) -> ForeignPatch<T> {
    let draw = params.sample(rng);
    apply_patch_augment(p, &draw, rng)
}
