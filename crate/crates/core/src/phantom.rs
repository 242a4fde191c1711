//! Smooth anatomy-like synthetic volumes: an ellipsoidal body on a zero
//! background holding a few soft-edged inner structures and low-frequency
//! texture. Used in place of real scans for desk-scale runs.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_volume;
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from_seed};
use crate::volume::{Dims, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub structures: usize,
    pub texture_amplitude: f64,
    /// Width of the soft edges, voxels.
    pub edge_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(64),
            structures: 5,
            texture_amplitude: 0.04,
            edge_width: 1.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate("phantom.dims")?;
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 0.2) {
            return Err(Error::invalid("phantom.texture_amplitude", "must be in [0, 0.2]"));
        }
        if !(self.edge_width > 0.0 && self.edge_width.is_finite()) {
            return Err(Error::invalid("phantom.edge_width", "must be positive"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    value: f64,
}

impl Ellipsoid {
    /// Approximate signed distance, negative inside.
    fn distance(&self, p: [f64; 3]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..3 {
            let q = (p[a] - self.center[a]) / self.semi[a];
            r2 += q * q;
        }
        let smallest = self.semi.iter().cloned().fold(f64::INFINITY, f64::min);
        (r2.sqrt() - 1.0) * smallest
    }
}

fn soft_step(d: f64, width: f64) -> f64 {
    1.0 / (1.0 + (d / width).exp())
}

/// One phantom volume with intensities in `[0, 1]`.
pub fn make_phantom<T: Scalar>(spec: &PhantomSpec, seed: u64) -> Result<Volume3D<T>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let d = spec.dims.0.map(|n| n as f64);
    let body = Ellipsoid {
        center: d.map(|n| n / 2.0),
        semi: d.map(|n| n * rng.random_range(0.40..0.46)),
        value: rng.random_range(0.30..0.40),
    };
    let inner: Vec<Ellipsoid> = (0..spec.structures)
        .map(|_| {
            let semi = d.map(|n| n * rng.random_range(0.06..0.16));
            let center =
                [0, 1, 2].map(|a| body.center[a] + rng.random_range(-0.45..0.45) * (body.semi[a] - semi[a]).max(0.0));
            Ellipsoid {
                center,
                semi,
                value: rng.random_range(0.45..0.85),
            }
        })
        .collect();
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.random_range(1.0..4.0) * TAU / d[a]);
            (k, rng.random_range(0.0..TAU))
        })
        .collect();

    let amp = spec.texture_amplitude / waves.len() as f64;
    let data = (0..spec.dims.len())
        .into_par_iter()
        .map(|i| {
            let c = spec.dims.coords(i);
            let p = [c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5];
            let inside_body = soft_step(body.distance(p), spec.edge_width);
            let mut v = body.value;
            for e in &inner {
                let w = soft_step(e.distance(p), spec.edge_width);
                v += w * (e.value - v);
            }
            let texture: f64 = waves
                .iter()
                .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
                .sum();
            T::of((inside_body * (v + amp * texture)).clamp(0.0, 1.0))
        })
        .collect();
    Volume3D::new(spec.dims, [1.0; 3], data)
}

/// Write `count` phantoms as `phantom_NNN.rvol`; phantom `i` uses
/// `derive_seed(seed, i)`.
pub fn write_phantoms(spec: &PhantomSpec, count: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let v = make_phantom::<f32>(spec, derive_seed(seed, i as u64))?;
            let path = out_dir.join(format!("phantom_{i:03}.rvol"));
            write_volume(&v, &path)?;
            Ok(path)
        })
        .collect()
}
