//! Yaw regressor used only to score frontalization.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataforge::render::render;
use crate::dataforge::scene::{ranges, SceneParams};
use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::optim::{Ranger, RangerConfig};
use crate::rng::{rng_fork, sample_stream, streams};
use crate::tensor::{Scalar, Tensor};

use super::{train_step, Bound, ConvBlock, Linear, ParamSet};

/// Inputs are average-pooled down to at most this side length.
pub const INPUT_SIZE: usize = 32;
const RENDER_FAMILY: u64 = 0x50;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor<T> {
    params: ParamSet<T>,
    layers: Layers,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    convs: Vec<ConvBlock>,
    head: Linear,
}

impl Layers {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("pose", format!("expected [N, 3, H, W], got {s:?}")));
        }
        let mut h = x;
        while g.shape(h)[2] > INPUT_SIZE {
            h = g.avg_pool2x(h)?;
        }
        if g.shape(h)[2] < INPUT_SIZE {
            h = g.resize_bilinear(h, INPUT_SIZE, INPUT_SIZE)?;
        }
        if g.shape(h)[2] != INPUT_SIZE || g.shape(h)[3] != INPUT_SIZE {
            return Err(Error::shape(
                "pose",
                format!("side must be {INPUT_SIZE} times a power of two or smaller, got {s:?}"),
            ));
        }
        for c in &self.convs {
            h = c.forward(g, p, h)?;
        }
        // yaw lives in where features sit, so keep the spatial layout
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        self.head.forward(g, p, flat)
    }
}

impl<T: Scalar> PoseRegressor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_fork(seed, streams::POSE_INIT);
        let mut params = ParamSet::new();
        let layout = [(3, 16), (16, 32), (32, 32)];
        let convs = layout
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| ConvBlock::new(&mut params, &mut rng, &format!("conv{i}"), cin, cout, 3, 2))
            .collect();
        let side = INPUT_SIZE >> layout.len();
        let head = Linear::new(&mut params, &mut rng, "head", 32 * side * side, 1, 1.0);
        PoseRegressor {
            params,
            layers: Layers { convs, head },
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Predicted yaw, `[N, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.layers.forward(g, p, x)
    }

    /// Predicted yaw of each `[3, H, W]` image.
    pub fn predict(&self, images: &[Tensor<T>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let p = self.bind(&mut g);
            let x = g.constant(&Tensor::stack(chunk)?);
            let y = self.forward(&mut g, &p, x)?;
            out.extend(g.value(y).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    pub fn to_named(&self) -> NamedTensors {
        self.params.to_named()
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let mut net = Self::new(0);
        net.params.load_named(nt)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseTraining {
    pub samples: usize,
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub steps: usize,
    pub batch: usize,
    pub resolution: usize,
    pub optimizer: RangerConfig,
}

impl Default for PoseTraining {
    fn default() -> Self {
        PoseTraining {
            samples: 480,
            holdout: 0.2,
            steps: 1500,
            batch: 16,
            resolution: 64,
            optimizer: RangerConfig {
                lr: 0.003,
                ..RangerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub heldout_mae: f64,
    /// Error of always predicting the training-label mean.
    pub baseline_mae: f64,
    /// Mean |prediction| over frontal renders of held-out scenes.
    pub frontal_abs_error: f64,
    pub final_loss: f64,
}

/// Labeled pose data: renders with yaw drawn over the full range.
pub fn pose_dataset(n: usize, res: usize, seed: u64) -> Result<Vec<(Tensor<f32>, SceneParams)>> {
    (0..n as u64)
        .map(|i| {
            let mut rng = rng_fork(seed, sample_stream(RENDER_FAMILY, i));
            let scene = SceneParams::sample(&mut rng, i, ranges::YAW);
            Ok((render(&scene, res)?.image, scene))
        })
        .collect()
}

/// Fits a regressor to `(image, yaw)` pairs, holding out the tail of `data`.
pub fn pretrain_pose(
    data: &[(Tensor<f32>, SceneParams)],
    cfg: &PoseTraining,
    seed: u64,
) -> Result<(PoseRegressor<f32>, PoseReport)> {
    let held_n = ((data.len() as f64 * cfg.holdout).round() as usize).max(1);
    if data.len() <= held_n {
        return Err(Error::invalid(format!(
            "{} pose samples leave no training data",
            data.len()
        )));
    }
    let (train, held) = data.split_at(data.len() - held_n);
    let mean = train.iter().map(|(_, s)| s.yaw).sum::<f64>() / train.len() as f64;
    let var = train.iter().map(|(_, s)| (s.yaw - mean).powi(2)).sum::<f64>() / train.len() as f64;
    if var < 1e-12 {
        return Err(Error::invalid("pose labels have zero variance"));
    }

    let mut net = PoseRegressor::<f32>::new(seed);
    let mut opt = Ranger::new(net.params.tensors(), cfg.optimizer)?;
    let mut order = rng_fork(seed, streams::TRAIN_ORDER ^ 0x5000);
    let mut aug = rng_fork(seed, streams::AUGMENT ^ 0x5000);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (img, scene) = train.choose(&mut order).expect("pose train set");
            // a mirrored render is the same scene at the opposite yaw
            if aug.random_bool(0.5) {
                images.push(img.flip_last());
                labels.push(-scene.yaw as f32);
            } else {
                images.push(img.clone());
                labels.push(scene.yaw as f32);
            }
        }
        let x = Tensor::stack(&images)?;
        let y = Tensor::new(vec![cfg.batch, 1], labels)?;
        let layers = &net.layers;
        final_loss = train_step(&mut net.params, &mut opt, |g, p| {
            let xv = g.constant(&x);
            let yv = g.constant(&y);
            let pred = layers.forward(g, p, xv)?;
            let d = g.sub(pred, yv)?;
            let d2 = g.square(d);
            Ok(g.mean(d2))
        })? as f64;
    }

    let images: Vec<Tensor<f32>> = held.iter().map(|(i, _)| i.clone()).collect();
    let pred = net.predict(&images)?;
    let heldout_mae = pred.iter().zip(held).map(|(p, (_, s))| (p - s.yaw).abs()).sum::<f64>() / held.len() as f64;
    let baseline_mae = held.iter().map(|(_, s)| (mean - s.yaw).abs()).sum::<f64>() / held.len() as f64;
    let frontal: Vec<Tensor<f32>> = held
        .iter()
        .map(|(_, s)| render(&SceneParams { yaw: 0.0, ..*s }, cfg.resolution).map(|r| r.image))
        .collect::<Result<_>>()?;
    let fp = net.predict(&frontal)?;
    let frontal_abs_error = fp.iter().map(|v| v.abs()).sum::<f64>() / fp.len() as f64;
    Ok((
        net,
        PoseReport {
            heldout_mae,
            baseline_mae,
            frontal_abs_error,
            final_loss,
        },
    ))
}
