//! Pipeline commands behind the `anosynth` binary. Each takes a validated
//! [`RunConfig`] whose paths already reflect command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::corruption::{emit_dataset, EmitReport, ShapeMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, EVAL_REPORT};
use crate::io::{read_json, read_volume, write_json, write_volume};
use crate::phantom::write_phantoms;
use crate::scoring::{baseline_gradient_scorer, fuse_scores, read_window_dir};
use crate::shape::{build_shape_library, load_library, save_library, ShapeLibrary};
use crate::validation::{build_validation_set, ValidationEntry, VALIDATION_MANIFEST};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSummary {
    pub shapes: usize,
    pub min_voxels: usize,
    pub max_voxels: usize,
    pub mean_voxels: f64,
    pub histogram: Vec<HistogramBin>,
}

impl fmt::Display for ShapeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} shapes, voxels min {} / mean {:.1} / max {}",
            self.shapes, self.min_voxels, self.mean_voxels, self.max_voxels
        )?;
        let widest = self.histogram.iter().map(|b| b.count).max().unwrap_or(1).max(1);
        for b in &self.histogram {
            let bar = "#".repeat((b.count * 40).div_ceil(widest));
            writeln!(f, "  [{:>7}, {:>7}] {:>5} {}", b.lo, b.hi, b.count, bar)?;
        }
        Ok(())
    }
}

/// Equal-width histogram of positive-voxel counts.
pub fn voxel_histogram(counts: &[usize], bins: usize) -> Vec<HistogramBin> {
    let (Some(&lo), Some(&hi)) = (counts.iter().min(), counts.iter().max()) else {
        return Vec::new();
    };
    let bins = bins.max(1).min(hi - lo + 1);
    let width = (hi - lo + 1).div_ceil(bins);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b * width,
            hi: (lo + (b + 1) * width - 1).min(hi),
            count: 0,
        })
        .collect();
    for &c in counts {
        out[(c - lo) / width].count += 1;
    }
    out.retain(|b| b.lo <= hi);
    out
}

pub fn cmd_build_shapes(cfg: &RunConfig) -> Result<ShapeSummary> {
    let lib = build_shape_library::<f32>(cfg.shapes.count, &cfg.shapes.grid(), cfg.seed)?;
    save_library(&lib, &cfg.paths.library)?;
    let counts: Vec<usize> = lib.shapes.iter().map(|s| s.count_positive()).collect();
    Ok(ShapeSummary {
        shapes: counts.len(),
        min_voxels: counts.iter().copied().min().unwrap_or(0),
        max_voxels: counts.iter().copied().max().unwrap_or(0),
        mean_voxels: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
        histogram: voxel_histogram(&counts, 10),
    })
}

/// Write a training set from `paths.sources`. The shape library is only
/// read when brush shapes can be drawn.
pub fn cmd_synthesize(cfg: &RunConfig) -> Result<EmitReport> {
    let needs_library = cfg.synthesis.count_per_volume > 0
        && matches!(cfg.dataset.generation.shapes, ShapeMode::Brush | ShapeMode::Complex);
    let library = if needs_library {
        load_library::<f32>(&cfg.paths.library)?
    } else {
        ShapeLibrary {
            shapes: Vec::new(),
            params: Vec::new(),
            seed: cfg.seed,
        }
    };
    emit_dataset(
        &cfg.paths.sources,
        &cfg.dataset,
        &library,
        &cfg.paths.dataset,
        cfg.synthesis.count_per_volume,
        cfg.seed,
    )
}

pub fn cmd_make_validation(cfg: &RunConfig) -> Result<Vec<ValidationEntry>> {
    let volumes = cfg
        .paths
        .held_out
        .par_iter()
        .map(|p| read_volume::<f32>(p).and_then(|v| cfg.dataset.preprocess.apply(v)))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = cfg.validation.clone();
    spec.seed = cfg.seed;
    build_validation_set(&volumes, &spec, &cfg.paths.validation)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreSummary {
    pub cases: usize,
    pub fused: bool,
}

fn file_name(path: &str) -> &str {
    Path::new(path).file_name().and_then(|s| s.to_str()).unwrap_or(path)
}

fn file_stem(path: &str) -> &str {
    Path::new(path).file_stem().and_then(|s| s.to_str()).unwrap_or(path)
}

/// Score every validation case into `paths.scores/<image file name>`:
/// fused window scores from `paths.patches/<case id>/` when patches are
/// configured, the gradient baseline otherwise.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreSummary> {
    let manifest: Vec<ValidationEntry> = read_json(&cfg.paths.validation.join(VALIDATION_MANIFEST))?;
    if let Some(patches) = &cfg.paths.patches {
        let missing: Vec<String> = manifest
            .iter()
            .map(|e| file_stem(&e.image_path).to_owned())
            .filter(|id| !patches.join(id).is_dir())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(
                "patches",
                format!("no window directory for cases: {}", missing.join(", ")),
            ));
        }
    }
    fs::create_dir_all(&cfg.paths.scores).map_err(|e| Error::io(&cfg.paths.scores, e))?;
    manifest.par_iter().try_for_each(|e| {
        let image: Volume3D<f32> = read_volume(cfg.paths.validation.join(&e.image_path))?;
        let scores = match &cfg.paths.patches {
            Some(dir) => {
                let (dims, windows) = read_window_dir::<f32>(&dir.join(file_stem(&e.image_path)))?;
                if dims != image.dims() {
                    return Err(Error::DimsMismatch {
                        expected: image.dims().0,
                        found: dims.0,
                    });
                }
                fuse_scores(dims, &windows, &cfg.fusion)?.with_spacing(image.spacing())?
            }
            None => baseline_gradient_scorer(&image),
        };
        write_volume(&scores, cfg.paths.scores.join(file_name(&e.image_path)))
    })?;
    Ok(ScoreSummary {
        cases: manifest.len(),
        fused: cfg.paths.patches.is_some(),
    })
}

/// Evaluate `paths.scores` against `paths.validation` and write
/// `paths.report/eval_report.json`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let report = evaluate::<f32>(&cfg.paths.validation, &cfg.paths.scores, &cfg.evaluation)?;
    write_json(&cfg.paths.report.join(EVAL_REPORT), &report)?;
    Ok(report)
}

pub fn cmd_make_phantoms(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    write_phantoms(&cfg.phantoms.spec, cfg.phantoms.count, cfg.seed, &cfg.paths.phantoms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_covers_every_count() {
        let counts = [5, 7, 7, 9, 20, 33, 33, 33];
        let h = voxel_histogram(&counts, 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), counts.len());
        assert_eq!(h.first().unwrap().lo, 5);
        assert_eq!(h.last().unwrap().hi, 33);
        for c in counts {
            assert_eq!(h.iter().filter(|b| b.lo <= c && c <= b.hi).count(), 1);
        }
        assert_eq!(voxel_histogram(&[4, 4], 10).len(), 1);
        assert!(voxel_histogram(&[], 10).is_empty());
    }
}
