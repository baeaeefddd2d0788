//! Paired training data for each task, in memory or as files plus a
//! JSON-lines manifest.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{self, Degradation, SUPERRES_FACTORS};
use super::ppm;
use super::render::{one_hot, render, NUM_PARTS};
use super::scene::{ranges, SceneParams, MAX_YAW};
use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::rng::{rng_fork, sample_stream, streams};
use crate::tensor::Tensor;

/// Identities at or above this id are reserved for encoder data, so the
/// recognition network never sees them during its own training.
pub const ENCODER_IDENTITY_BASE: u64 = 10_000;

/// Yaw magnitudes drawn for frontalization inputs.
pub const PROFILE_YAW: (f64, f64) = (0.3, MAX_YAW);

/// Occlusion coverage range for inpainting samples.
pub const INPAINT_COVERAGE: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Inversion,
    Frontalization,
    Sketch,
    Segmentation,
    Superres,
    Inpaint,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Inversion,
        Task::Frontalization,
        Task::Sketch,
        Task::Segmentation,
        Task::Superres,
        Task::Inpaint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Inversion => "inversion",
            Task::Frontalization => "frontalization",
            Task::Sketch => "sketch",
            Task::Segmentation => "segmentation",
            Task::Superres => "superres",
            Task::Inpaint => "inpaint",
        }
    }

    /// Channel count of the condition image fed to the encoder.
    pub fn condition_channels(self) -> usize {
        match self {
            Task::Sketch => 1,
            Task::Segmentation => NUM_PARTS,
            _ => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub condition: Tensor<f32>,
    pub target: Tensor<f32>,
    /// Inner-face region of the target, `[1, H, W]`.
    pub mask: Tensor<f32>,
    pub scene: SceneParams,
    pub degradation: Degradation,
}

/// Rounds to the 8-bit grid so that file round trips are exact.
fn quantized(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Sample `index` of `task`; a pure function of its arguments.
pub fn generate_sample(task: Task, seed: u64, index: u64, res: usize) -> Result<Sample> {
    let mut rng = rng_fork(seed, sample_stream(streams::DATASET, index));
    let identity = ENCODER_IDENTITY_BASE + index;
    let scene = if task == Task::Frontalization {
        let mut s = SceneParams::sample(&mut rng, identity, PROFILE_YAW);
        if rng.random_bool(0.5) {
            s.yaw = -s.yaw;
        }
        s
    } else {
        SceneParams::sample(&mut rng, identity, ranges::YAW)
    };
    let r = render(&scene, res)?;
    let target = quantized(&r.image);
    let (condition, degradation) = match task {
        Task::Inversion => (target.clone(), Degradation::None),
        Task::Frontalization => (target.clone(), Degradation::Profile),
        Task::Sketch => (degrade::sketchify(&target)?, Degradation::Sketch),
        Task::Segmentation => (one_hot(&r.segmentation), Degradation::Segmentation),
        Task::Superres => {
            let factor = SUPERRES_FACTORS[rng.random_range(0..SUPERRES_FACTORS.len())];
            let d = degrade::downsample_bicubic(&target, factor)?;
            (quantized(&d.condition), Degradation::Downsample { factor })
        }
        Task::Inpaint => {
            let coverage = rng.random_range(INPAINT_COVERAGE.0..INPAINT_COVERAGE.1);
            let m = degrade::triangular_mask(res, coverage)?;
            (
                quantized(&degrade::occlude(&target, &m)?),
                Degradation::Occlusion { coverage },
            )
        }
    };
    Ok(Sample {
        index,
        condition,
        target,
        mask: r.face_mask,
        scene,
        degradation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl SplitRatios {
    /// Exact split sizes for `n` samples: val and test are rounded down and
    /// the remainder goes to train.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios {r:?} must be non-negative and sum to 1"
            )));
        }
        let val = (n as f64 * self.val).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        Ok([n - val - test, val, test])
    }

    /// Disjoint, seeded index sets for train, val and test.
    pub fn assign(&self, n: usize, seed: u64) -> Result<[Vec<u64>; 3]> {
        let [tr, va, _] = self.counts(n)?;
        let mut order: Vec<u64> = (0..n as u64).collect();
        order.shuffle(&mut rng_fork(seed, streams::SPLIT));
        let mut parts = [
            order[..tr].to_vec(),
            order[tr..tr + va].to_vec(),
            order[tr + va..].to_vec(),
        ];
        for p in &mut parts {
            p.sort_unstable();
        }
        Ok(parts)
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: u64,
    pub task: Task,
    pub split: Split,
    pub resolution: usize,
    pub condition_path: String,
    pub target_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub scene_params: SceneParams,
    pub degradation: Degradation,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn write_condition(dir: &Path, stem: &str, task: Task, sample: &Sample) -> Result<String> {
    match task {
        Task::Segmentation => {
            let name = format!("{stem}_cond.ntf");
            let mut nt = NamedTensors::new();
            nt.insert_float("condition", &sample.condition);
            nt.save(dir.join(&name))?;
            Ok(name)
        }
        Task::Sketch => {
            let name = format!("{stem}_cond.pgm");
            ppm::save(dir.join(&name), &sample.condition)?;
            Ok(name)
        }
        _ => {
            let name = format!("{stem}_cond.ppm");
            ppm::save(dir.join(&name), &sample.condition)?;
            Ok(name)
        }
    }
}

/// Generates `n` samples under `out` and writes the manifest.
pub fn make_dataset(
    task: Task,
    n: usize,
    ratios: SplitRatios,
    seed: u64,
    res: usize,
    out: &Path,
) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let splits = ratios.assign(n, seed)?;
    let mut split_of = vec![Split::Train; n];
    for (s, idx) in [Split::Train, Split::Val, Split::Test].into_iter().zip(&splits) {
        for &i in idx {
            split_of[i as usize] = s;
        }
    }
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(n);
    for index in 0..n as u64 {
        let sample = generate_sample(task, seed, index, res)?;
        let stem = format!("{index:06}");
        let condition_path = write_condition(out, &stem, task, &sample)?;
        let target_path = format!("{stem}_target.ppm");
        ppm::save(out.join(&target_path), &sample.target)?;
        let mask_path = format!("{stem}_mask.ntf");
        let mut nt = NamedTensors::new();
        nt.insert_float("mask", &sample.mask);
        nt.save(out.join(&mask_path))?;
        entries.push(ManifestEntry {
            index,
            task,
            split: split_of[index as usize],
            resolution: res,
            condition_path,
            target_path,
            mask_path: Some(mask_path),
            scene_params: sample.scene,
            degradation: sample.degradation,
        });
    }
    let mut w = BufWriter::new(File::create(out.join(MANIFEST_FILE))?);
    for e in &entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = File::open(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("manifest line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn load_condition(path: &Path, task: Task) -> Result<Tensor<f32>> {
    if task == Task::Segmentation {
        NamedTensors::load(path)?.float("condition")
    } else {
        ppm::load(path)
    }
}

/// Loads a manifest entry back into memory.
pub fn load_sample(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    let path = |p: &str| -> PathBuf { dir.join(p) };
    let mask = match &e.mask_path {
        Some(p) => NamedTensors::load(path(p))?.float("mask")?,
        None => Tensor::full(vec![1, e.resolution, e.resolution], 1.0),
    };
    Ok(Sample {
        index: e.index,
        condition: load_condition(&path(&e.condition_path), e.task)?,
        target: ppm::load(path(&e.target_path))?,
        mask,
        scene: e.scene_params,
        degradation: e.degradation.clone(),
    })
}

/// Every sample of `split` listed in the manifest under `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_sample(dir, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_condition_is_target() {
        let s = generate_sample(Task::Inversion, 3, 5, 32).unwrap();
        assert_eq!(s.condition, s.target);
        assert_eq!(s.degradation, Degradation::None);
    }

    #[test]
    fn samples_are_pure_functions_of_seed_and_index() {
        for task in Task::ALL {
            let a = generate_sample(task, 9, 4, 32).unwrap();
            assert_eq!(a, generate_sample(task, 9, 4, 32).unwrap());
            assert_ne!(a.target, generate_sample(task, 9, 5, 32).unwrap().target);
            assert_eq!(a.condition.shape()[0], task.condition_channels());
        }
    }

    #[test]
    fn frontalization_inputs_are_profiles() {
        for i in 0..20 {
            let s = generate_sample(Task::Frontalization, 1, i, 16).unwrap();
            assert!(s.scene.yaw.abs() >= PROFILE_YAW.0);
        }
    }

    #[test]
    fn superres_covers_every_factor() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..600 {
            // factor choice does not depend on resolution, so render small
            if let Degradation::Downsample { factor } = generate_sample(Task::Superres, 2, i, 32)
                .map(|s| s.degradation)
                .unwrap_or(Degradation::None)
            {
                seen.insert(factor);
            }
        }
        assert_eq!(seen.len(), SUPERRES_FACTORS.len());
    }

    #[test]
    fn split_counts_are_exact_and_disjoint() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(512).unwrap(), [410, 51, 51]);
        assert_eq!(r.counts(7).unwrap(), [7, 0, 0]);
        let parts = r.assign(512, 4).unwrap();
        let mut all: Vec<u64> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..512).collect::<Vec<_>>());
        assert!(SplitRatios {
            train: 0.5,
            val: 0.1,
            test: 0.1
        }
        .counts(10)
        .is_err());
    }

    #[test]
    fn unknown_task_rejected() {
        assert!("colorize".parse::<Task>().is_err());
        assert_eq!("superres".parse::<Task>().unwrap(), Task::Superres);
    }

    #[test]
    fn files_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for task in Task::ALL {
            let sub = dir.path().join(task.name());
            let entries = make_dataset(task, 6, SplitRatios::default(), 7, 32, &sub).unwrap();
            assert_eq!(read_manifest(&sub).unwrap(), entries);
            for e in &entries {
                let loaded = load_sample(&sub, e).unwrap();
                assert_eq!(loaded, generate_sample(task, 7, e.index, 32).unwrap(), "{task}");
            }
        }
    }
}
