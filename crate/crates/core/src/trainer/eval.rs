//! Held-out metrics: reconstruction, perceptual and identity similarity,
//! output pose, offset size and per-image runtime.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataforge::dataset::{Sample, Task};
use crate::dataforge::render::{colorize, NUM_PARTS};
use crate::error::{Error, Result};
use crate::netlib::recognition::cosine;
use crate::psp::{psp_forward, psp_forward_graph, Encoder};
use crate::synthgen::Generator;
use crate::tensor::Tensor;

use super::AuxNets;

/// Minimum number of timed single-image forwards.
pub const MIN_RUNTIME_IMAGES: usize = 50;
const WARMUP: usize = 3;
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub mse: f64,
    pub perceptual: f64,
    /// Mean cosine between R embeddings of output and target.
    pub id_similarity: f64,
    /// Mean |P(output)|; the frontal target has yaw 0.
    pub pose_mae: Option<f64>,
    /// Mean |P(input)|, the reference for `pose_mae`.
    pub input_pose_abs: Option<f64>,
    /// Mean over samples and style rows of `‖E(x)‖`.
    pub offset_norm: f64,
    pub runtime_per_image_seconds: f64,
}

impl EvalReport {
    /// Equality of everything except wall-clock runtime.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        let mut a = self.clone();
        a.runtime_per_image_seconds = other.runtime_per_image_seconds;
        a == *other
    }

    fn check_finite(&self) -> Result<()> {
        let mut v = vec![
            self.mse,
            self.perceptual,
            self.id_similarity,
            self.offset_norm,
            self.runtime_per_image_seconds,
        ];
        v.extend(self.pose_mae);
        v.extend(self.input_pose_abs);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "evaluation produced non-finite metrics: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Quality metrics of `outputs` against `targets`.
pub struct Scores {
    pub mse: f64,
    pub perceptual: f64,
    pub id_similarity: f64,
    pub output_pose_abs: f64,
    pub input_pose_abs: f64,
}

/// Scores outputs against targets; `inputs` feed the pose reference.
pub fn score_outputs(
    aux: &AuxNets,
    outputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    inputs: &[Tensor<f32>],
) -> Result<Scores> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "cannot score {} outputs against {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let n = outputs.len() as f64;
    let mut mse = 0.0;
    let mut perceptual = 0.0;
    for (y, x) in outputs.iter().zip(targets) {
        mse += y.mse(x)? as f64;
        perceptual += aux.perceptual.distance(y, x)? as f64;
    }
    let ey = aux.recognition.embed_images(outputs)?;
    let ex = aux.recognition.embed_images(targets)?;
    let id_similarity = ey.iter().zip(&ex).map(|(a, b)| cosine(a, b)).sum::<f64>() / n;
    let mean_abs = |v: Vec<f64>| v.iter().map(|p| p.abs()).sum::<f64>() / v.len().max(1) as f64;
    let output_pose_abs = mean_abs(aux.pose.predict(outputs)?);
    let rgb: Vec<Tensor<f32>> = inputs.iter().filter(|t| t.shape()[0] == 3).cloned().collect();
    let input_pose_abs = if rgb.is_empty() {
        f64::NAN
    } else {
        mean_abs(aux.pose.predict(&rgb)?)
    };
    Ok(Scores {
        mse: mse / n,
        perceptual: perceptual / n,
        id_similarity,
        output_pose_abs,
        input_pose_abs,
    })
}

/// Reconstructions and mean offset norm for `samples`, in zero-noise mode.
pub fn reconstruct(e: &Encoder<f32>, gen: &Generator<f32>, samples: &[Sample]) -> Result<(Vec<Tensor<f32>>, f64)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut norm_sum = 0.0;
    let mut rows = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let ep = e.bind(&mut g, false);
        let gp = gen.bind(&mut g);
        let x = g.constant(&Tensor::stack(
            &chunk.iter().map(|s| s.condition.clone()).collect::<Vec<_>>(),
        )?);
        let out = psp_forward_graph(&mut g, e, &ep, gen, &gp, x)?;
        let y = g.value(out.image);
        images.extend((0..chunk.len()).map(|i| y.select(i)));
        let off = g.value(out.offset);
        let d = *off.shape().last().expect("offset rank");
        for row in off.data().chunks(d) {
            norm_sum += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            rows += 1;
        }
    }
    Ok((images, norm_sum / rows.max(1) as f64))
}

/// Mean wall-clock seconds of a single-image `psp_forward`, over at least
/// [`MIN_RUNTIME_IMAGES`] calls after a short warmup.
pub fn runtime_per_image(e: &Encoder<f32>, gen: &Generator<f32>, samples: &[Sample], images: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("runtime measurement needs at least one sample"));
    }
    let images = images.max(MIN_RUNTIME_IMAGES);
    for s in samples.iter().cycle().take(WARMUP) {
        psp_forward(e, gen, &s.condition)?;
    }
    let start = Instant::now();
    for s in samples.iter().cycle().take(images) {
        psp_forward(e, gen, &s.condition)?;
    }
    Ok(start.elapsed().as_secs_f64() / images as f64)
}

/// Full metric suite over a held-out split.
pub fn evaluate(
    e: &Encoder<f32>,
    gen: &Generator<f32>,
    split: &[Sample],
    aux: &AuxNets,
    task: Task,
    step: usize,
    runtime_images: usize,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let (outputs, offset_norm) = reconstruct(e, gen, split)?;
    let targets: Vec<Tensor<f32>> = split.iter().map(|s| s.target.clone()).collect();
    let inputs: Vec<Tensor<f32>> = split.iter().map(|s| s.condition.clone()).collect();
    let scores = score_outputs(aux, &outputs, &targets, &inputs)?;
    let frontal = task == Task::Frontalization;
    let report = EvalReport {
        step,
        mse: scores.mse,
        perceptual: scores.perceptual,
        id_similarity: scores.id_similarity,
        pose_mae: frontal.then_some(scores.output_pose_abs),
        input_pose_abs: frontal.then_some(scores.input_pose_abs),
        offset_norm,
        runtime_per_image_seconds: runtime_per_image(e, gen, split, runtime_images)?,
    };
    report.check_finite()?;
    Ok(report)
}

/// RGB rendering of a condition image of any task.
pub fn condition_preview(c: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = c.shape();
    match s.first() {
        Some(3) => Ok(c.clone()),
        Some(1) => {
            let mut data = c.data().to_vec();
            data.extend_from_within(..);
            data.extend_from_slice(c.data());
            Tensor::new(vec![3, s[1], s[2]], data)
        }
        Some(&k) if k == NUM_PARTS => {
            let plane = s[1] * s[2];
            let labels: Vec<u8> = (0..plane)
                .map(|i| {
                    (0..k)
                        .max_by(|&a, &b| c.data()[a * plane + i].total_cmp(&c.data()[b * plane + i]))
                        .expect("parts") as u8
                })
                .collect();
            Ok(colorize(&Tensor::new(vec![s[1], s[2]], labels)?))
        }
        _ => Err(Error::shape(
            "condition_preview",
            format!("unsupported condition shape {s:?}"),
        )),
    }
}

/// Grid rows of `(condition, target, output)` for the first `rows` samples.
pub fn preview_grid(e: &Encoder<f32>, gen: &Generator<f32>, split: &[Sample], rows: usize) -> Result<Tensor<f32>> {
    let picked = &split[..rows.min(split.len())];
    let (outputs, _) = reconstruct(e, gen, picked)?;
    let mut cells = Vec::with_capacity(3 * picked.len());
    for (s, y) in picked.iter().zip(outputs) {
        cells.push(condition_preview(&s.condition)?);
        cells.push(s.target.clone());
        cells.push(y);
    }
    crate::dataforge::ppm::grid(&cells, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_preview_repeats_the_plane() {
        let c = Tensor::new(vec![1, 1, 2], vec![0.25f32, 0.75]).unwrap();
        let p = condition_preview(&c).unwrap();
        assert_eq!(p.shape(), [3, 1, 2]);
        assert_eq!(p.data(), [0.25, 0.75, 0.25, 0.75, 0.25, 0.75]);
    }

    #[test]
    fn same_metrics_ignores_runtime() {
        let a = EvalReport {
            step: 3,
            mse: 0.1,
            perceptual: 0.2,
            id_similarity: 0.5,
            pose_mae: None,
            input_pose_abs: None,
            offset_norm: 1.0,
            runtime_per_image_seconds: 0.01,
        };
        let mut b = a.clone();
        b.runtime_per_image_seconds = 0.02;
        assert!(a.same_metrics(&b));
        b.mse = 0.11;
        assert!(!a.same_metrics(&b));
    }
}
