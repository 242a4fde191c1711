//! Whole-volume anomaly scores: sliding-window planning and Gaussian-weighted
//! fusion, ensembling, the sample-level top-100 score and a non-learned
//! gradient baseline.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_volume, write_json, write_volume};
use crate::num::Scalar;
use crate::volume::{Dims, Volume3D};

/// Per-voxel anomaly scores in `[0, 1]`, same grid as the image.
pub type ScoreMap<T> = Volume3D<T>;

/// Number of top-scoring voxels averaged by [`sample_score`].
pub const TOP_K: usize = 100;

/// Lower bound on fusion weights so window corners never divide by zero.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub patch_size: Dims,
    pub overlap: f64,
    /// Gaussian sigma as a fraction of the window extent.
    pub gaussian_sigma_fraction: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            patch_size: Dims::cube(160),
            overlap: 0.5,
            gaussian_sigma_fraction: 0.125,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch_size.validate("fusion.patch_size")?;
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid("fusion.overlap", "must be in [0, 1)"));
        }
        if !(self.gaussian_sigma_fraction > 0.0 && self.gaussian_sigma_fraction.is_finite()) {
            return Err(Error::invalid("fusion.gaussian_sigma_fraction", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

impl Window {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.start[a] + self.size[a])
    }
}

/// Window starts along one axis: stride `floor(patch * (1 - overlap))`
/// (at least 1), with the last window moved flush to the far boundary.
pub fn plan_axis(dim: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let p = patch.min(dim).max(1);
    let stride = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts = vec![0];
    let mut s = 0;
    while s + p < dim {
        s += stride;
        if s + p >= dim {
            starts.push(dim - p);
            break;
        }
        starts.push(s);
    }
    starts.dedup();
    starts
}

/// Sliding windows covering every voxel, x-fastest order. Patch extents
/// larger than the volume shrink to the volume.
pub fn plan_windows(volume: Dims, cfg: &FusionConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    volume.validate("volume")?;
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| plan_axis(volume.0[a], cfg.patch_size.0[a], cfg.overlap))
        .collect();
    let size = [
        cfg.patch_size.0[0].min(volume.0[0]),
        cfg.patch_size.0[1].min(volume.0[1]),
        cfg.patch_size.0[2].min(volume.0[2]),
    ];
    let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                out.push(Window { start: [x, y, z], size });
            }
        }
    }
    Ok(out)
}

/// 1D Gaussian importance profile peaking at the window center.
pub fn gaussian_profile(size: usize, sigma_fraction: f64) -> Vec<f64> {
    let sigma = (sigma_fraction * size as f64).max(f64::MIN_POSITIVE);
    let c = size as f64 / 2.0;
    (0..size)
        .map(|j| {
            let d = j as f64 + 0.5 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Fusion weight of local voxel `l` in a window with the given profiles.
#[inline]
fn weight(profiles: &[Vec<f64>; 3], l: [usize; 3]) -> f64 {
    (profiles[0][l[0]] * profiles[1][l[1]] * profiles[2][l[2]]).max(WEIGHT_FLOOR)
}

/// Gaussian-weighted average of overlapping window scores:
/// `sum(w_i s_i) / sum(w_i)` per voxel.
pub fn fuse_scores<T: Scalar>(
    volume: Dims,
    patches: &[(Window, ScoreMap<T>)],
    cfg: &FusionConfig,
) -> Result<ScoreMap<T>> {
    cfg.validate()?;
    volume.validate("volume")?;
    let mut profiles = Vec::with_capacity(patches.len());
    for (w, s) in patches {
        if s.dims().0 != w.size {
            return Err(Error::DimsMismatch {
                expected: w.size,
                found: s.dims().0,
            });
        }
        if (0..3).any(|a| w.size[a] == 0 || w.start[a] + w.size[a] > volume.0[a]) {
            return Err(Error::invalid(
                "window",
                format!("{:?}+{:?} outside volume {:?}", w.start, w.size, volume.0),
            ));
        }
        profiles.push([
            gaussian_profile(w.size[0], cfg.gaussian_sigma_fraction),
            gaussian_profile(w.size[1], cfg.gaussian_sigma_fraction),
            gaussian_profile(w.size[2], cfg.gaussian_sigma_fraction),
        ]);
    }
    let [nx, ny, nz] = volume.0;
    let slab = nx * ny;
    let slices: Vec<Result<Vec<T>>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut num = vec![0.0f64; slab];
            let mut den = vec![0.0f64; slab];
            for ((w, s), prof) in patches.iter().zip(&profiles) {
                if z < w.start[2] || z >= w.start[2] + w.size[2] {
                    continue;
                }
                let lz = z - w.start[2];
                for ly in 0..w.size[1] {
                    let y = w.start[1] + ly;
                    for lx in 0..w.size[0] {
                        let x = w.start[0] + lx;
                        let wt = weight(prof, [lx, ly, lz]);
                        num[x + nx * y] += wt * s.get(lx, ly, lz).as_f64();
                        den[x + nx * y] += wt;
                    }
                }
            }
            num.iter()
                .zip(&den)
                .enumerate()
                .map(|(i, (&n, &d))| {
                    if d > 0.0 {
                        Ok(T::of(n / d))
                    } else {
                        Err(Error::Uncovered {
                            voxel: [i % nx, i / nx, z],
                        })
                    }
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(volume.len());
    for s in slices {
        data.extend(s?);
    }
    Ok(Volume3D::from_vec(volume, data))
}

/// Voxelwise arithmetic mean. Each voxel's values are summed in sorted
/// order, so the result does not depend on the order of `maps`.
pub fn ensemble_mean<T: Scalar>(maps: &[ScoreMap<T>]) -> Result<ScoreMap<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("maps", "ensemble needs at least one map"))?;
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::DimsMismatch {
                expected: first.dims().0,
                found: m.dims().0,
            });
        }
    }
    let n = maps.len() as f64;
    let data = (0..first.dims().len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(maps.len()),
            |buf, i| {
                buf.clear();
                buf.extend(maps.iter().map(|m| m.data()[i].as_f64()));
                buf.sort_by(f64::total_cmp);
                T::of(buf.iter().sum::<f64>() / n)
            },
        )
        .collect();
    Volume3D::new(first.dims(), first.spacing(), data)
}

/// Mean of the [`TOP_K`] highest voxel scores; volumes with fewer voxels
/// average all of them.
pub fn sample_score<T: Scalar>(scores: &[T]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = scores.iter().map(|s| s.as_f64()).collect();
    let k = TOP_K.min(v.len());
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut v[..k];
    top.sort_by(f64::total_cmp);
    top.iter().sum::<f64>() / k as f64
}

/// Central-difference gradient magnitude, min-max normalized per volume.
/// Border voxels use the clamped neighbor.
pub fn baseline_gradient_scorer<T: Scalar>(x: &Volume3D<T>) -> ScoreMap<T> {
    let d = x.dims();
    let mag: Vec<f64> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let p = d.coords(i);
            let mut g2 = 0.0;
            for a in 0..3 {
                let mut lo = p;
                let mut hi = p;
                lo[a] = p[a].saturating_sub(1);
                hi[a] = (p[a] + 1).min(d.0[a] - 1);
                let g = (x.get(hi[0], hi[1], hi[2]).as_f64() - x.get(lo[0], lo[1], lo[2]).as_f64()) / 2.0;
                g2 += g * g;
            }
            g2.sqrt()
        })
        .collect();
    let (lo, hi) = mag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let data = if hi > lo {
        mag.iter().map(|&v| T::of((v - lo) / (hi - lo)).clamp01()).collect()
    } else {
        vec![T::zero(); d.len()]
    };
    Volume3D::new(d, x.spacing(), data).expect("same grid as input")
}

/// Window metadata stored next to each patch score file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowFile {
    pub volume_dims: [usize; 3],
    pub start: [usize; 3],
    pub size: [usize; 3],
}

pub const WINDOW_SUFFIX: &str = ".window.json";

/// Write `<stem>.window.json` plus the `<stem>.rvol` patch scores.
pub fn write_window_patch<T: Scalar>(
    dir: &Path,
    stem: &str,
    volume: Dims,
    window: &Window,
    scores: &ScoreMap<T>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join(format!("{stem}{WINDOW_SUFFIX}")),
        &WindowFile {
            volume_dims: volume.0,
            start: window.start,
            size: window.size,
        },
    )?;
    write_volume(scores, dir.join(format!("{stem}.rvol")))
}

/// Read every `*.window.json` / `.rvol` pair in `dir`, sorted by name.
/// Missing patch files are reported together.
pub fn read_window_dir<T: Scalar>(dir: &Path) -> Result<(Dims, Vec<(Window, ScoreMap<T>)>)> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(WINDOW_SUFFIX))
                .map(str::to_owned)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::invalid(
            "patches",
            format!("no *{WINDOW_SUFFIX} files in {}", dir.display()),
        ));
    }
    let missing: Vec<String> = stems
        .iter()
        .map(|s| format!("{s}.rvol"))
        .filter(|f| !dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(
            "patches",
            format!("missing patch files: {}", missing.join(", ")),
        ));
    }
    let mut volume: Option<[usize; 3]> = None;
    let mut out = Vec::with_capacity(stems.len());
    for s in &stems {
        let wf: WindowFile = read_json(&dir.join(format!("{s}{WINDOW_SUFFIX}")))?;
        match volume {
            None => volume = Some(wf.volume_dims),
            Some(v) if v != wf.volume_dims => {
                return Err(Error::DimsMismatch {
                    expected: v,
                    found: wf.volume_dims,
                })
            }
            Some(_) => {}
        }
        let scores = read_volume::<T>(dir.join(format!("{s}.rvol")))?;
        out.push((
            Window {
                start: wf.start,
                size: wf.size,
            },
            scores,
        ));
    }
    Ok((Dims(volume.expect("non-empty")), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_axis_examples() {
        assert_eq!(plan_axis(160, 160, 0.5), vec![0]);
        assert_eq!(plan_axis(256, 160, 0.5), vec![0, 80, 96]);
        assert_eq!(plan_axis(10, 4, 0.0), vec![0, 4, 6]);
        assert_eq!(plan_axis(8, 4, 0.0), vec![0, 4]);
        assert_eq!(plan_axis(5, 16, 0.5), vec![0]);
        assert_eq!(plan_axis(5, 1, 0.9), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_window_for_matching_volume() {
        let cfg = FusionConfig::default();
        let w = plan_windows(Dims::cube(160), &cfg).unwrap();
        assert_eq!(
            w,
            vec![Window {
                start: [0; 3],
                size: [160; 3]
            }]
        );
        let small = plan_windows(Dims::new(20, 30, 40), &cfg).unwrap();
        assert_eq!(small.len(), 1);
        assert_eq!(small[0].size, [20, 30, 40]);
    }

    #[test]
    fn single_window_fusion_is_identity() {
        let d = Dims::new(6, 5, 4);
        let s = Volume3D::from_fn(d, |x, y, z| ((x * 3 + y * 5 + z * 7) % 13) as f32 / 12.0);
        let cfg = FusionConfig {
            patch_size: Dims::cube(8),
            ..FusionConfig::default()
        };
        let wins = plan_windows(d, &cfg).unwrap();
        let fused = fuse_scores(d, &[(wins[0], s.clone())], &cfg).unwrap();
        assert_eq!(fused, s);
    }

    #[test]
    fn overlapping_constant_windows_stay_constant() {
        let d = Dims::new(12, 1, 1);
        let cfg = FusionConfig {
            patch_size: Dims::new(8, 1, 1),
            ..FusionConfig::default()
        };
        let wins = plan_windows(d, &cfg).unwrap();
        assert_eq!(wins.len(), 2);
        let patches: Vec<_> = wins
            .iter()
            .map(|w| (*w, Volume3D::filled(Dims(w.size), 0.3f32)))
            .collect();
        let fused = fuse_scores(d, &patches, &cfg).unwrap();
        assert!(fused.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn overlap_voxel_leans_toward_nearer_center() {
        let d = Dims::new(12, 1, 1);
        let cfg = FusionConfig {
            patch_size: Dims::new(8, 1, 1),
            overlap: 0.5,
            gaussian_sigma_fraction: 0.125,
        };
        let a = Window {
            start: [0, 0, 0],
            size: [8, 1, 1],
        };
        let b = Window {
            start: [4, 0, 0],
            size: [8, 1, 1],
        };
        let patches = vec![
            (a, Volume3D::filled(Dims(a.size), 0.0f64)),
            (b, Volume3D::filled(Dims(b.size), 1.0f64)),
        ];
        let fused = fuse_scores(d, &patches, &cfg).unwrap();
        // Direct weights: sigma = 1, window centers at 4 and 8 (continuous).
        let g = |center: f64, x: usize| (-(x as f64 + 0.5 - center).powi(2) / 2.0).exp();
        for x in 4..8 {
            let (wa, wb) = (g(4.0, x), g(8.0, x));
            let expected = wb / (wa + wb);
            assert!((fused.get(x, 0, 0) - expected).abs() < 1e-12);
            assert!(fused.get(x, 0, 0) > 0.0 && fused.get(x, 0, 0) < 1.0);
        }
        assert!(fused.get(4, 0, 0) < 0.5);
        assert!(fused.get(7, 0, 0) > 0.5);
    }

    #[test]
    fn uncovered_voxels_are_errors() {
        let d = Dims::new(6, 1, 1);
        let w = Window {
            start: [0, 0, 0],
            size: [3, 1, 1],
        };
        let err = fuse_scores(
            d,
            &[(w, Volume3D::filled(Dims(w.size), 0.5f32))],
            &FusionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Uncovered { voxel: [3, 0, 0] }));
    }

    #[test]
    fn ensemble_examples() {
        let d = Dims::cube(3);
        let a = Volume3D::filled(d, 0.2f32);
        let b = Volume3D::filled(d, 0.6f32);
        assert_eq!(ensemble_mean(std::slice::from_ref(&a)).unwrap(), a);
        let m = ensemble_mean(&[a.clone(), b.clone()]).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert_eq!(m, ensemble_mean(&[b, a]).unwrap());
        assert!(ensemble_mean::<f32>(&[]).is_err());
        assert!(ensemble_mean(&[Volume3D::<f32>::zeros(d), Volume3D::zeros(Dims::cube(2))]).is_err());
    }

    #[test]
    fn sample_score_examples() {
        let n = 1000;
        assert!((sample_score(&vec![0.3f32; n]) - 0.3f32 as f64).abs() < 1e-12);
        let mut v = vec![0.0f32; n];
        v[..100].fill(1.0);
        assert_eq!(sample_score(&v), 1.0);
        let mut v = vec![0.0f32; n];
        v[500..550].fill(1.0);
        assert_eq!(sample_score(&v), 0.5);
        assert!((sample_score(&[0.2f32, 0.4]) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn gradient_scorer_examples() {
        let c = Volume3D::filled(Dims::cube(5), 0.7f32);
        assert!(baseline_gradient_scorer(&c).data().iter().all(|&v| v == 0.0));
        let step = Volume3D::from_fn(Dims::new(10, 4, 4), |x, _, _| if x >= 5 { 1.0f32 } else { 0.0 });
        let s = baseline_gradient_scorer(&step);
        for y in 0..4 {
            for z in 0..4 {
                assert_eq!(s.get(4, y, z), 1.0);
                assert_eq!(s.get(5, y, z), 1.0);
                assert_eq!(s.get(0, y, z), 0.0);
            }
        }
    }

    #[test]
    fn window_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::new(10, 6, 6);
        let cfg = FusionConfig {
            patch_size: Dims::cube(6),
            ..FusionConfig::default()
        };
        let src = Volume3D::from_fn(d, |x, y, z| (x + y + z) as f32 / 20.0);
        let wins = plan_windows(d, &cfg).unwrap();
        for (i, w) in wins.iter().enumerate() {
            let patch = src.crop(w.start, Dims(w.size)).unwrap();
            write_window_patch(dir.path(), &format!("w{i:03}"), d, w, &patch).unwrap();
        }
        let (vd, patches) = read_window_dir::<f32>(dir.path()).unwrap();
        assert_eq!(vd, d);
        assert_eq!(patches.len(), wins.len());
        let fused = fuse_scores(vd, &patches, &cfg).unwrap();
        for (a, b) in fused.data().iter().zip(src.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        fs::remove_file(dir.path().join("w001.rvol")).unwrap();
        let err = read_window_dir::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("w001.rvol"), "{err}");
    }
}
