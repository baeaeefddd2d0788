//! Identity embedding network trained by softmax classification over
//! synthetic identities.

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

use super::{center_crop, global_mean_pool, train_step, Bound, ConvBlock, Linear, ParamSet};

/// Fraction of each side kept by the central crop before identification.
pub const CROP_FRACTION: f64 = 0.75;
/// Side length the crop is resized to.
pub const CROP_SIZE: usize = 32;
pub const EMBED_DIM: usize = 32;
const NORM_EPS: f64 = 1e-12;
const RENDER_FAMILY: u64 = 0x52;

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionNet<T> {
    params: ParamSet<T>,
    layers: Layers,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    convs: Vec<ConvBlock>,
    embed: Linear,
    classify: Linear,
    classes: usize,
}

impl<T: Scalar> RecognitionNet<T> {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut rng = rng_fork(seed, streams::RECOGNITION_INIT);
        let mut params = ParamSet::new();
        let layout = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 2)];
        let convs = layout
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| ConvBlock::new(&mut params, &mut rng, &format!("conv{i}"), cin, cout, 3, s))
            .collect();
        let embed = Linear::new(&mut params, &mut rng, "embed", 64, EMBED_DIM, 1.0);
        let classify = Linear::new(&mut params, &mut rng, "classify", EMBED_DIM, classes, 1.0);
        RecognitionNet {
            params,
            layers: Layers {
                convs,
                embed,
                classify,
                classes,
            },
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.layers.classes
    }

    pub fn cast<U: Scalar>(&self) -> RecognitionNet<U> {
        RecognitionNet {
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Unit-norm identity embedding, `[N, EMBED_DIM]`.
    pub fn embed(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.layers.embed(g, p, x)
    }

    /// Embeddings of `[3, H, W]` images, one row each.
    pub fn embed_images(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(&Tensor::stack(images)?);
        let e = self.embed(&mut g, &p, x)?;
        Ok(g.value(e).data().chunks(EMBED_DIM).map(<[T]>::to_vec).collect())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = self.params.to_named();
        nt.insert_json("arch", &serde_json::json!({ "classes": self.layers.classes }));
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let arch = nt.json("arch")?;
        let classes = arch["classes"]
            .as_u64()
            .ok_or_else(|| Error::format("recognition arch record lacks `classes`"))?;
        let mut net = Self::new(classes as usize, 0);
        let mut weights = nt.clone();
        weights.remove("arch");
        net.params.load_named(&weights)?;
        Ok(net)
    }
}

impl Layers {
    /// Un-normalized embedding of `[N, 3, H, W]` images.
    fn raw_embedding<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("recognition", format!("expected [N, 3, H, W], got {s:?}")));
        }
        let crop = center_crop(g, x, CROP_FRACTION)?;
        let mut h = g.resize_bilinear(crop, CROP_SIZE, CROP_SIZE)?;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
        }
        let pooled = global_mean_pool(g, h)?;
        self.embed.forward(g, p, pooled)
    }

    /// Unit-norm identity embedding, `[N, EMBED_DIM]`.
    fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let e = self.raw_embedding(g, p, x)?;
        g.l2_normalize(e, NORM_EPS)
    }

    fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let e = self.raw_embedding(g, p, x)?;
        self.classify.forward(g, p, e)
    }
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-30)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognitionTraining {
    pub identities: usize,
    pub renders_per_identity: usize,
    /// Renders per identity kept out of training for evaluation.
    pub holdout_per_identity: usize,
    pub steps: usize,
    pub batch: usize,
    pub resolution: usize,
    pub optimizer: RangerConfig,
}

impl Default for RecognitionTraining {
    fn default() -> Self {
        RecognitionTraining {
            identities: 48,
            renders_per_identity: 12,
            holdout_per_identity: 2,
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
pub struct RecognitionReport {
    pub heldout_accuracy: f64,
    pub chance: f64,
    pub same_identity_cosine: f64,
    pub cross_identity_cosine: f64,
    pub final_loss: f64,
}

/// Render `k` of identity `id` in the recognition training family.
pub fn identity_render(seed: u64, id: u64, k: u64, per_id: u64, res: usize) -> Result<Tensor<f32>> {
    let mut rng = rng_fork(seed, sample_stream(RENDER_FAMILY, id * per_id + k));
    Ok(render(&SceneParams::sample(&mut rng, id, ranges::YAW), res)?.image)
}

/// Trains on identities `0..identities`, which lie below the encoder-data
/// identity range.
pub fn pretrain_recognition(cfg: &RecognitionTraining, seed: u64) -> Result<(RecognitionNet<f32>, RecognitionReport)> {
    if cfg.identities < 32 {
        return Err(Error::invalid(format!(
            "recognition pretraining needs at least 32 identities, got {}",
            cfg.identities
        )));
    }
    if cfg.renders_per_identity < 8
        || cfg.holdout_per_identity == 0
        || cfg.holdout_per_identity >= cfg.renders_per_identity
    {
        return Err(Error::invalid(format!(
            "need at least 8 renders per identity with a non-empty training and held-out part, got {} / {}",
            cfg.renders_per_identity, cfg.holdout_per_identity
        )));
    }
    let per = cfg.renders_per_identity as u64;
    let keep = per - cfg.holdout_per_identity as u64;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for id in 0..cfg.identities as u64 {
        for k in 0..per {
            let img = identity_render(seed, id, k, per, cfg.resolution)?;
            if k < keep {
                train.push((img, id as usize));
            } else {
                held.push((img, id as usize));
            }
        }
    }

    let mut net = RecognitionNet::<f32>::new(cfg.identities, seed);
    let mut opt = Ranger::new(net.params.tensors(), cfg.optimizer)?;
    let mut order = rng_fork(seed, streams::TRAIN_ORDER ^ 0x5200);
    let mut aug = rng_fork(seed, streams::AUGMENT ^ 0x5200);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let picks: Vec<&(Tensor<f32>, usize)> = (0..cfg.batch)
            .map(|_| train.choose(&mut order).expect("train set"))
            .collect();
        let images: Vec<Tensor<f32>> = picks
            .iter()
            .map(|(img, _)| {
                if aug.random_bool(0.5) {
                    img.flip_last()
                } else {
                    img.clone()
                }
            })
            .collect();
        let mut onehot = vec![0.0f32; cfg.batch * cfg.identities];
        for (i, (_, label)) in picks.iter().enumerate() {
            onehot[i * cfg.identities + label] = 1.0;
        }
        let x = Tensor::stack(&images)?;
        let y = Tensor::new(vec![cfg.batch, cfg.identities], onehot)?;
        let scale = -1.0 / cfg.batch as f64;
        let layers = &net.layers;
        let loss = train_step(&mut net.params, &mut opt, |g, p| {
            let xv = g.constant(&x);
            let yv = g.constant(&y);
            let logits = layers.logits(g, p, xv)?;
            let lp = g.log_softmax(logits)?;
            let picked = g.mul(lp, yv)?;
            let s = g.sum(picked);
            Ok(g.mul_scalar(s, scale))
        })?;
        final_loss = loss as f64;
    }

    let report = evaluate_recognition(&net, &held, final_loss)?;
    Ok((net, report))
}

fn evaluate_recognition(
    net: &RecognitionNet<f32>,
    held: &[(Tensor<f32>, usize)],
    final_loss: f64,
) -> Result<RecognitionReport> {
    let mut correct = 0usize;
    let mut embeddings = Vec::with_capacity(held.len());
    for chunk in held.chunks(32) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let x = g.constant(&Tensor::stack(&images)?);
        let logits = net.layers.logits(&mut g, &p, x)?;
        for (row, (_, label)) in g.value(logits).data().chunks(net.classes()).zip(chunk) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += (best == *label) as usize;
        }
        embeddings.extend(net.embed_images(&images)?);
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..held.len() {
        for j in i + 1..held.len() {
            let c = cosine(&embeddings[i], &embeddings[j]);
            if held[i].1 == held[j].1 {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    Ok(RecognitionReport {
        heldout_accuracy: correct as f64 / held.len() as f64,
        chance: 1.0 / net.classes() as f64,
        same_identity_cosine: same / ns.max(1) as f64,
        cross_identity_cosine: cross / nc.max(1) as f64,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm() {
        let net = RecognitionNet::<f64>::new(32, 3);
        let imgs: Vec<Tensor<f64>> = (0..3)
            .map(|k| identity_render(1, k, 0, 1, 64).unwrap().cast())
            .collect();
        for e in net.embed_images(&imgs).unwrap() {
            let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_identities_rejected() {
        let cfg = RecognitionTraining {
            identities: 31,
            ..RecognitionTraining::default()
        };
        assert!(pretrain_recognition(&cfg, 1).is_err());
        let cfg = RecognitionTraining {
            renders_per_identity: 7,
            ..RecognitionTraining::default()
        };
        assert!(pretrain_recognition(&cfg, 1).is_err());
    }

    #[test]
    fn cosine_bounds() {
        assert_eq!(cosine(&[1.0f64, 0.0], &[-2.0, 0.0]), -1.0);
        assert!((cosine(&[1.0f64, 1.0], &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn named_round_trip() {
        let net = RecognitionNet::<f32>::new(33, 5);
        assert_eq!(RecognitionNet::from_named(&net.to_named()).unwrap(), net);
    }
}
