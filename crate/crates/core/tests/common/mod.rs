//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use anomaly_synth::rng::rng_from_seed;
use anomaly_synth::{Dims, Volume};
use rand::Rng;

/// Number of 26-connected components among voxels with weight > 0.
pub fn components_26(dims: Dims, data: &[f32]) -> usize {
    let [nx, ny, nz] = dims.0;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut seen = vec![false; data.len()];
    let mut components = 0;
    for start in 0..data.len() {
        if data[start] <= 0.0 || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        let j = idx(qx as usize, qy as usize, qz as usize);
                        if data[j] > 0.0 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    components
}

/// Average precision by sweeping every distinct score as a threshold and
/// recounting true and false positives from scratch at each one.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0
                } else {
                    fp += 1.0
                }
            }
        }
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Largest absolute difference between 6-neighbors.
pub fn max_six_neighbor_step(v: &Volume) -> f32 {
    let [nx, ny, nz] = v.dims().0;
    let mut best = 0.0f32;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = v.get(x, y, z);
                if x + 1 < nx {
                    best = best.max((c - v.get(x + 1, y, z)).abs());
                }
                if y + 1 < ny {
                    best = best.max((c - v.get(x, y + 1, z)).abs());
                }
                if z + 1 < nz {
                    best = best.max((c - v.get(x, y, z + 1)).abs());
                }
            }
        }
    }
    best
}

/// Random volume with values in `[lo, hi]`.
pub fn random_volume(dims: Dims, lo: f32, hi: f32, seed: u64) -> Volume {
    let mut rng = rng_from_seed(seed);
    let data = (0..dims.len()).map(|_| rng.random_range(lo..=hi)).collect();
    Volume::from_vec(dims, data)
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Write a volume the way an external producer would: raw little-endian
/// `f32` plus a hand-built JSON sidecar.
pub fn write_raw_volume(path: &Path, dims: [usize; 3], data: &[f32]) {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).unwrap();
    let sidecar = format!(
        "{{\"dims\": [{}, {}, {}], \"spacing\": [1.0, 1.0, 1.0], \"dtype\": \"f32le\", \"order\": \"xyz\"}}",
        dims[0], dims[1], dims[2]
    );
    fs::write(path.with_extension("json"), sidecar).unwrap();
}
