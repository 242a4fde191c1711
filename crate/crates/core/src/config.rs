//! Run configuration: one TOML file covering every tunable, with unknown
//! keys rejected and each section validated at load time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::DatasetConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::phantom::PhantomSpec;
use crate::scoring::FusionConfig;
use crate::shape::BrushParams;
use crate::validation::ValidationSetSpec;
use crate::volume::Dims;

/// Shape library settings. The brush grid is every combination of the
/// listed values; radii are given for a 64-voxel canvas and scale with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub count: usize,
    pub canvas: Dims,
    pub steps: Vec<usize>,
    pub initial_radius: Vec<f64>,
    pub step_sigma: Vec<f64>,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            count: 300,
            canvas: Dims::cube(64),
            steps: vec![10, 20, 40],
            initial_radius: vec![2.0, 4.0, 8.0],
            step_sigma: vec![1.0, 2.0, 4.0],
        }
    }
}

impl ShapesConfig {
    pub fn grid(&self) -> Vec<BrushParams> {
        let scale = self.canvas.min_axis() as f64 / 64.0;
        let mut grid = Vec::new();
        for &steps in &self.steps {
            for &r in &self.initial_radius {
                for &step_sigma in &self.step_sigma {
                    grid.push(BrushParams {
                        steps,
                        initial_radius: (r * scale).max(1.0),
                        step_sigma,
                        canvas: self.canvas,
                    });
                }
            }
        }
        grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("count", "must be at least 1"));
        }
        for (name, empty) in [
            ("steps", self.steps.is_empty()),
            ("initial_radius", self.initial_radius.is_empty()),
            ("step_sigma", self.step_sigma.is_empty()),
        ] {
            if empty {
                return Err(Error::invalid(name, "must not be empty"));
            }
        }
        for (i, s) in self.step_sigma.iter().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("step_sigma[{i}]"), "must be positive"));
            }
        }
        for (i, r) in self.initial_radius.iter().enumerate() {
            if !(*r > 0.0 && r.is_finite()) {
                return Err(Error::invalid(format!("initial_radius[{i}]"), "must be positive"));
            }
        }
        for (i, s) in self.steps.iter().enumerate() {
            if *s == 0 {
                return Err(Error::invalid(format!("steps[{i}]"), "must be at least 1"));
            }
        }
        for p in self.grid() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub count_per_volume: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { count_per_volume: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomsConfig {
    pub count: usize,
    #[serde(flatten)]
    pub spec: PhantomSpec,
}

impl Default for PhantomsConfig {
    fn default() -> Self {
        PhantomsConfig {
            count: 8,
            spec: PhantomSpec::default(),
        }
    }
}

/// Input and output locations. Each command writes to its own directory,
/// which `--out` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Anomaly-free training volumes for `synthesize`.
    pub sources: Vec<PathBuf>,
    /// Held-out volumes for `make-validation`.
    pub held_out: Vec<PathBuf>,
    pub library: PathBuf,
    pub dataset: PathBuf,
    pub validation: PathBuf,
    pub scores: PathBuf,
    /// Per-case directories of window score files; when set, `score`
    /// fuses them instead of running the baseline scorer.
    pub patches: Option<PathBuf>,
    pub report: PathBuf,
    pub phantoms: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            sources: Vec::new(),
            held_out: Vec::new(),
            library: "shapes".into(),
            dataset: "dataset".into(),
            validation: "validation".into(),
            scores: "scores".into(),
            patches: None,
            report: "report".into(),
            phantoms: "phantoms".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub shapes: ShapesConfig,
    pub synthesis: SynthesisConfig,
    pub dataset: DatasetConfig,
    pub validation: ValidationSetSpec,
    pub fusion: FusionConfig,
    pub evaluation: EvalOptions,
    pub phantoms: PhantomsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_owned(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes.validate().map_err(|e| e.within("shapes"))?;
        self.dataset.validate().map_err(|e| e.within("dataset"))?;
        self.validation.validate().map_err(|e| e.within("validation"))?;
        self.fusion.validate().map_err(|e| e.within("fusion"))?;
        self.evaluation.validate().map_err(|e| e.within("evaluation"))?;
        self.phantoms.spec.validate().map_err(|e| e.within("phantoms"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, Path::new("run.toml"))
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(parse(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn default_grid_matches_library_default() {
        let s = ShapesConfig::default();
        assert_eq!(s.grid(), crate::shape::default_brush_grid(s.canvas));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("[shapes]\ncolor = 3\n").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("color"), "{err}");
        assert!(parse("bogus = 1\n").is_err());
        assert!(parse("[phantoms]\nbogus = 1\n").is_err());
        assert_eq!(
            parse("[phantoms]\ncount = 2\nstructures = 1\n")
                .unwrap()
                .phantoms
                .spec
                .structures,
            1
        );
    }

    #[test]
    fn invalid_values_carry_field_paths() {
        let err = parse("[shapes]\nstep_sigma = [1.0, 0.0]\n").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("shapes.step_sigma[1]"), "{err}");
        let err = parse("[dataset.generation]\nalpha_range = [0.5, 1.5]\n").unwrap_err();
        assert!(err.to_string().contains("dataset.generation.alpha_range"), "{err}");
        let err = parse("[fusion]\noverlap = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("fusion.overlap"), "{err}");
    }

    #[test]
    fn sections_parse() {
        let cfg = parse(
            "seed = 9\n[dataset.generation]\nshapes = \"cuboid\"\nedges = \"hard\"\n[validation.counts]\nhealthy = 2\n[evaluation]\nsubset = \"baseline\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.generation.shapes, crate::corruption::ShapeMode::Cuboid);
        assert_eq!(cfg.validation.counts.healthy, 2);
        assert_eq!(cfg.evaluation.subset, crate::evaluation::Subset::Baseline);
    }
}
