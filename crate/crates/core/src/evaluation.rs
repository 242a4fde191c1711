//! Average precision against binary truth, pooled over a validation set,
//! with per-family breakdowns and sample-level ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_volume};
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scoring::sample_score;
use crate::validation::{ValidationEntry, ValidationFamily, TRUTH_THRESHOLD, VALIDATION_MANIFEST};
use crate::volume::Volume3D;

/// Step-wise average precision: `sum_n (R_n - R_{n-1}) * P_n` over unique
/// score thresholds in descending order. Tied scores form one threshold.
pub fn average_precision<S: Scalar>(scores: &[S], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} labels for {} scores", labels.len(), scores.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            field: format!("scores[{i}]"),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut runs = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        runs.push((pos, neg));
    }
    ap_from_runs(runs.into_iter())
}

/// AP from `(positives, negatives)` counts per threshold, highest first.
fn ap_from_runs(runs: impl Iterator<Item = (u64, u64)> + Clone) -> Result<f64> {
    let total_pos: u64 = runs.clone().map(|r| r.0).sum();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut seen, mut ap) = (0u64, 0u64, 0.0f64);
    for (pos, neg) in runs {
        tp += pos;
        seen += pos + neg;
        if pos > 0 {
            ap += (pos as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// Order-preserving integer key for an `f32` score.
fn score_key(s: f32) -> u32 {
    let b = s.to_bits();
    if b >> 31 == 1 {
        !b
    } else {
        b | 0x8000_0000
    }
}

/// Mergeable (score, label) histogram at `f32` resolution, kept as sorted
/// runs. Merging is exact, so partial accumulators combine in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApAccumulator {
    runs: Vec<(u32, u64, u64)>,
}

impl ApAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f32, bool)>) -> Self {
        let mut keyed: Vec<(u32, bool)> = pairs.into_iter().map(|(s, l)| (score_key(s), l)).collect();
        keyed.sort_unstable();
        let mut runs: Vec<(u32, u64, u64)> = Vec::new();
        for (k, l) in keyed {
            match runs.last_mut() {
                Some(r) if r.0 == k => {
                    if l {
                        r.1 += 1
                    } else {
                        r.2 += 1
                    }
                }
                _ => runs.push((k, l as u64, (!l) as u64)),
            }
        }
        ApAccumulator { runs }
    }

    pub fn merge(self, other: ApAccumulator) -> ApAccumulator {
        let (a, b) = (self.runs, other.runs);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((a[i].0, a[i].1 + b[j].1, a[i].2 + b[j].2));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        ApAccumulator { runs: out }
    }

    pub fn positives(&self) -> u64 {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn total(&self) -> u64 {
        self.runs.iter().map(|r| r.1 + r.2).sum()
    }

    pub fn positive_rate(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.positives() as f64 / n as f64,
        }
    }

    pub fn average_precision(&self) -> Result<f64> {
        ap_from_runs(self.runs.iter().rev().map(|r| (r.1, r.2)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Pixel,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Excludes the smoothed-edge families.
    Baseline,
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub task: Task,
    pub subset: Subset,
    /// Further restricts the evaluated families; empty keeps all.
    pub families: Vec<ValidationFamily>,
    /// Keep each voxel with this probability (pixel task only).
    pub voxel_subsample: Option<f64>,
    pub subsample_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: Task::Pixel,
            subset: Subset::Full,
            families: Vec::new(),
            voxel_subsample: None,
            subsample_seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.voxel_subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("evaluation.voxel_subsample", "must be in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn includes(&self, family: ValidationFamily) -> bool {
        let in_subset = match self.subset {
            Subset::Full => true,
            Subset::Baseline => !family.is_smoothed(),
        };
        in_subset && (self.families.is_empty() || self.families.contains(&family))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub family: ValidationFamily,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub ap_overall: f64,
    /// `None` where a family has no positives under this task.
    pub ap_by_family: BTreeMap<String, Option<f64>>,
    pub positive_rate: f64,
    pub n_cases: usize,
    pub cases_by_family: BTreeMap<String, usize>,
    pub sample_scores: Vec<SampleScore>,
    pub config_echo: EvalOptions,
}

pub const EVAL_REPORT: &str = "eval_report.json";

fn case_id(entry: &ValidationEntry) -> String {
    Path::new(&entry.image_path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(&entry.image_path)
        .to_owned()
}

fn score_file(entry: &ValidationEntry) -> String {
    Path::new(&entry.image_path)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(&entry.image_path)
        .to_owned()
}

struct CaseResult {
    family: ValidationFamily,
    acc: ApAccumulator,
    sample: SampleScore,
}

fn selected_cases(
    validation_dir: &Path,
    scores_dir: &Path,
    opts: &EvalOptions,
) -> Result<Vec<(usize, ValidationEntry)>> {
    opts.validate()?;
    let manifest: Vec<ValidationEntry> = read_json(&validation_dir.join(VALIDATION_MANIFEST))?;
    let cases: Vec<(usize, ValidationEntry)> = manifest
        .into_iter()
        .enumerate()
        .filter(|(_, e)| opts.includes(e.family))
        .collect();
    let missing: Vec<String> = cases
        .iter()
        .map(|(_, e)| score_file(e))
        .filter(|f| !scores_dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(
            "scores",
            format!("missing score maps: {}", missing.join(", ")),
        ));
    }
    Ok(cases)
}

fn load_case<T: Scalar>(
    validation_dir: &Path,
    scores_dir: &Path,
    index: usize,
    entry: &ValidationEntry,
    opts: &EvalOptions,
) -> Result<CaseResult> {
    let truth = read_volume::<T>(validation_dir.join(&entry.truth_path))?;
    let scores: Volume3D<T> = read_volume(scores_dir.join(score_file(entry)))?;
    if truth.dims() != scores.dims() {
        return Err(Error::DimsMismatch {
            expected: truth.dims().0,
            found: scores.dims().0,
        });
    }
    let pairs = scores
        .data()
        .iter()
        .zip(truth.data())
        .map(|(s, t)| (s.as_f32(), t.as_f64() > TRUTH_THRESHOLD));
    let acc = match (opts.task, opts.voxel_subsample) {
        (Task::Pixel, Some(f)) if f < 1.0 => {
            let mut rng = rng_from_seed(derive_seed(opts.subsample_seed, index as u64));
            ApAccumulator::from_pairs(pairs.filter(|_| rng.random_bool(f)))
        }
        (Task::Pixel, _) => ApAccumulator::from_pairs(pairs),
        (Task::Sample, _) => ApAccumulator::new(),
    };
    Ok(CaseResult {
        family: entry.family,
        acc,
        sample: SampleScore {
            id: case_id(entry),
            family: entry.family,
            score: sample_score(scores.data()),
        },
    })
}

fn load_all<T: Scalar>(validation_dir: &Path, scores_dir: &Path, opts: &EvalOptions) -> Result<Vec<CaseResult>> {
    let cases = selected_cases(validation_dir, scores_dir, opts)?;
    cases
        .par_iter()
        .map(|(i, e)| load_case::<T>(validation_dir, scores_dir, *i, e, opts))
        .collect()
}

fn counts_by_family(results: &[CaseResult]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in results {
        *m.entry(r.family.to_string()).or_insert(0) += 1;
    }
    m
}

fn optional_ap(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoPositives) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Pixel-wise AP with voxels pooled across every selected case, plus the
/// same pooled AP restricted to each family's cases.
pub fn evaluate_pixelwise<T: Scalar>(
    validation_dir: &Path,
    scores_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let opts = EvalOptions {
        task: Task::Pixel,
        ..opts.clone()
    };
    let results = load_all::<T>(validation_dir, scores_dir, &opts)?;
    let mut per_family: BTreeMap<String, ApAccumulator> = BTreeMap::new();
    let mut sample_scores = Vec::with_capacity(results.len());
    let cases_by_family = counts_by_family(&results);
    let n_cases = results.len();
    for r in results {
        let slot = per_family.entry(r.family.to_string()).or_default();
        *slot = std::mem::take(slot).merge(r.acc);
        sample_scores.push(r.sample);
    }
    let mut ap_by_family = BTreeMap::new();
    for (f, acc) in &per_family {
        ap_by_family.insert(f.clone(), optional_ap(acc.average_precision())?);
    }
    let overall = per_family
        .into_values()
        .fold(ApAccumulator::new(), ApAccumulator::merge);
    Ok(EvalReport {
        task: Task::Pixel,
        ap_overall: overall.average_precision()?,
        ap_by_family,
        positive_rate: overall.positive_rate(),
        n_cases,
        cases_by_family,
        sample_scores,
        config_echo: opts,
    })
}

/// Sample-wise AP of the top-voxel score, labelled anomalous for every
/// family but healthy. Per-family AP ranks healthy cases against that family.
pub fn evaluate_samplewise<T: Scalar>(
    validation_dir: &Path,
    scores_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let opts = EvalOptions {
        task: Task::Sample,
        ..opts.clone()
    };
    let results = load_all::<T>(validation_dir, scores_dir, &opts)?;
    let healthy = ValidationFamily::Healthy;
    let ap_of = |keep: &dyn Fn(ValidationFamily) -> bool| -> Result<(f64, f64)> {
        let (s, l): (Vec<f64>, Vec<bool>) = results
            .iter()
            .filter(|r| keep(r.family))
            .map(|r| (r.sample.score, r.family != healthy))
            .unzip();
        let rate = l.iter().filter(|&&b| b).count() as f64 / l.len().max(1) as f64;
        Ok((average_precision(&s, &l)?, rate))
    };
    let (ap_overall, positive_rate) = ap_of(&|_| true)?;
    let cases_by_family = counts_by_family(&results);
    let mut ap_by_family = BTreeMap::new();
    for &f in &ValidationFamily::ALL {
        if !cases_by_family.contains_key(f.name()) {
            continue;
        }
        let ap = if f == healthy {
            None
        } else {
            optional_ap(ap_of(&|g| g == f || g == healthy).map(|r| r.0))?
        };
        ap_by_family.insert(f.to_string(), ap);
    }
    Ok(EvalReport {
        task: Task::Sample,
        ap_overall,
        ap_by_family,
        positive_rate,
        n_cases: results.len(),
        cases_by_family,
        sample_scores: results.into_iter().map(|r| r.sample).collect(),
        config_echo: opts,
    })
}

pub fn evaluate<T: Scalar>(validation_dir: &Path, scores_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    match opts.task {
        Task::Pixel => evaluate_pixelwise::<T>(validation_dir, scores_dir, opts),
        Task::Sample => evaluate_samplewise::<T>(validation_dir, scores_dir, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9f64, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(
            average_precision(&[0.1f64, 0.9, 0.2], &[true, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&[0.9f64, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        assert!(matches!(
            average_precision(&[0.5f64], &[false]),
            Err(Error::NoPositives)
        ));
        assert!(average_precision(&[0.5f64], &[true, false]).is_err());
    }

    #[test]
    fn constant_scores_give_positive_rate() {
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let ap = average_precision(&[0.0f32; 40], &labels).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ties_form_one_threshold() {
        // one threshold holding 1 positive and 1 negative, then a lone positive
        let ap = average_precision(&[0.5f64, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (0.5 * 0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn accumulator_matches_direct_ap_and_merges_exactly() {
        let scores: Vec<f32> = (0..500).map(|i| ((i * 37) % 101) as f32 / 100.0 - 0.3).collect();
        let labels: Vec<bool> = (0..500).map(|i| (i * 13) % 7 < 2).collect();
        let direct = average_precision(&scores, &labels).unwrap();
        let whole = ApAccumulator::from_pairs(scores.iter().copied().zip(labels.iter().copied()));
        assert!((whole.average_precision().unwrap() - direct).abs() < 1e-12);
        let a = ApAccumulator::from_pairs(scores[..200].iter().copied().zip(labels[..200].iter().copied()));
        let b = ApAccumulator::from_pairs(scores[200..].iter().copied().zip(labels[200..].iter().copied()));
        assert_eq!(a.clone().merge(b.clone()), whole);
        assert_eq!(b.merge(a), whole);
    }

    #[test]
    fn score_key_preserves_order() {
        let v = [-1.0f32, -0.0, 0.0, 1e-30, 0.5, 1.0, 3.0];
        for w in v.windows(2) {
            assert!(score_key(w[0]) <= score_key(w[1]));
        }
    }

    #[test]
    fn baseline_subset_drops_smoothed() {
        let opts = EvalOptions {
            subset: Subset::Baseline,
            ..EvalOptions::default()
        };
        let kept = ValidationFamily::ALL.iter().filter(|&&f| opts.includes(f)).count();
        assert_eq!(kept, 6);
    }
}
