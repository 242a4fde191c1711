//! Synthetic anomaly generation and evaluation for 3D volumetric images.
//!
//! Core types are generic over the voxel scalar (`f32` or `f64`); the
//! aliases below fix it to `f32`, the on-disk precision.

pub mod commands;
pub mod config;
pub mod corruption;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod num;
pub mod patch_bank;
pub mod phantom;
pub mod rng;
pub mod scoring;
pub mod shape;
pub mod validation;
pub mod volume;

pub use config::RunConfig;
pub use corruption::{emit_dataset, generate_sample, interpolate, AnomalyRecord, DatasetConfig, GenerationConfig};
pub use error::{Error, Result};
pub use evaluation::{average_precision, evaluate_pixelwise, evaluate_samplewise, EvalOptions, EvalReport};
pub use io::{read_volume, write_volume};
pub use num::Scalar;
pub use scoring::{ensemble_mean, fuse_scores, plan_windows, sample_score, FusionConfig, Window};
pub use validation::{build_validation_set, ValidationFamily, ValidationSetSpec};
pub use volume::{Dims, Volume3D};

pub type Volume = volume::Volume3D<f32>;
pub type Mask = shape::ShapeMask<f32>;
pub type Alpha = corruption::AlphaMap<f32>;
pub type Sample = corruption::CorruptedSample<f32>;
pub type Patch = patch_bank::ForeignPatch<f32>;
pub type Bank = patch_bank::PatchBank<f32>;
pub type Library = shape::ShapeLibrary<f32>;
pub type Case = validation::ValidationCase<f32>;
pub type Scores = scoring::ScoreMap<f32>;

pub type Volume64 = volume::Volume3D<f64>;
pub type Mask64 = shape::ShapeMask<f64>;
