//! Supervised pretraining of G against the procedural renderer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataforge::render::render;
use crate::dataforge::scene::{ranges, SceneParams, SCENE_CODE_DIM};
use crate::error::{Error, Result};
use crate::netlib::{train_step, PerceptualExtractor};
use crate::optim::{Ranger, RangerConfig};
use crate::rng::{normal, rng_fork, sample_stream, streams};
use crate::tensor::{Scalar, Tensor};

use super::{Generator, GeneratorConfig, Noise};

pub const MIN_PAIRS: usize = 512;
const PAIR_FAMILY: u64 = 0x47;
/// Identities used for generator pairs sit above both the recognition and
/// encoder identity ranges.
const PAIR_IDENTITY_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTraining {
    pub pairs: usize,
    pub holdout: f64,
    pub steps: usize,
    pub batch: usize,
    pub perceptual_weight: f64,
    pub mean_latent_samples: usize,
    pub optimizer: RangerConfig,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        GeneratorTraining {
            pairs: 1024,
            holdout: 0.1,
            steps: 3000,
            batch: 8,
            perceptual_weight: 0.5,
            mean_latent_samples: 10_000,
            optimizer: RangerConfig {
                lr: 0.002,
                ..RangerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub heldout_l2_untrained: f64,
    pub heldout_l2_trained: f64,
    pub final_loss: f64,
}

/// `(z, render)` pairs. The first coordinates of `z` are the scene's
/// normal scores; the rest are per-sample standard-normal filler.
pub fn generator_pairs(n: usize, res: usize, d: usize, seed: u64) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    if d < SCENE_CODE_DIM {
        return Err(Error::invalid(format!(
            "latent dim {d} is below the {SCENE_CODE_DIM} scene coordinates"
        )));
    }
    (0..n as u64)
        .map(|i| {
            let mut rng = rng_fork(seed, sample_stream(PAIR_FAMILY, i));
            let scene = SceneParams::sample(&mut rng, PAIR_IDENTITY_BASE + i, ranges::YAW);
            let mut z: Vec<f32> = scene.latent_code().iter().map(|&v| v as f32).collect();
            z.extend((SCENE_CODE_DIM..d).map(|_| normal(&mut rng) as f32));
            Ok((Tensor::new(vec![d], z)?, render(&scene, res)?.image))
        })
        .collect()
}

fn heldout_l2(gen: &Generator<f32>, held: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in held.chunks(32) {
        let z = Tensor::stack(&chunk.iter().map(|(z, _)| z.clone()).collect::<Vec<_>>())?;
        let target = Tensor::stack(&chunk.iter().map(|(_, x)| x.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = gen.bind(&mut g);
        let zv = g.constant(&z);
        let w = gen.mapping_graph(&mut g, &p, zv)?;
        let y = gen.synthesis_replicated(&mut g, &p, w, Noise::Zero)?;
        total += g.value(y).mse(&target)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / held.len() as f64)
}

/// Trains G on `(z, image)` pairs by L2 plus perceptual distance between
/// `G(replicate(f(z)))` and the render, then estimates w̄.
pub fn pretrain_generator(
    config: GeneratorConfig,
    data: &[(Tensor<f32>, Tensor<f32>)],
    cfg: &GeneratorTraining,
    perceptual: &PerceptualExtractor<f32>,
    seed: u64,
) -> Result<(Generator<f32>, GeneratorReport)> {
    if data.len() < MIN_PAIRS {
        return Err(Error::invalid(format!(
            "generator pretraining needs at least {MIN_PAIRS} pairs, got {}",
            data.len()
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let held_n = ((data.len() as f64 * cfg.holdout).round() as usize).clamp(1, data.len() - 1);
    let (train, held) = data.split_at(data.len() - held_n);
    for (z, x) in data {
        if z.shape() != [config.latent_dim] || x.shape() != [3, config.resolution, config.resolution] {
            return Err(Error::shape(
                "pretrain_generator",
                format!("pair shapes {:?} / {:?}", z.shape(), x.shape()),
            ));
        }
    }

    let mut gen = Generator::<f32>::new(config, seed)?;
    let heldout_l2_untrained = heldout_l2(&gen, held)?;
    let mut opt = Ranger::new(gen.params.tensors(), cfg.optimizer)?;
    let mut order_rng = rng_fork(seed, streams::TRAIN_ORDER ^ 0x4700);
    let mut noise_rng = rng_fork(seed, streams::NOISE ^ 0x4700);
    let mut order: Vec<usize> = Vec::new();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let z = Tensor::stack(&idx.iter().map(|&i| train[i].0.clone()).collect::<Vec<_>>())?;
        let x = Tensor::stack(&idx.iter().map(|&i| train[i].1.clone()).collect::<Vec<_>>())?;
        let layers = &gen.layers;
        let d = gen.config.latent_dim;
        let n_styles = layers.styles.len();
        let noise = &mut noise_rng;
        final_loss = train_step(&mut gen.params, &mut opt, |g, p| {
            let fp = perceptual.bind(g);
            let zv = g.constant(&z);
            let xv = g.constant(&x);
            let w = layers.mapping(g, p, zv, d)?;
            let y = layers.synthesis(g, p, &vec![w; n_styles], Noise::Fresh(noise))?;
            let diff = g.sub(y, xv)?;
            let sq = g.square(diff);
            let l2 = g.mean(sq);
            let lp = perceptual.distance_graph(g, &fp, y, xv)?;
            let lp = g.mul_scalar(lp, cfg.perceptual_weight);
            g.add(l2, lp)
        })? as f64;
    }
    gen.estimate_mean_latent(cfg.mean_latent_samples.max(1), seed)?;
    let heldout_l2_trained = heldout_l2(&gen, held)?;
    Ok((
        gen,
        GeneratorReport {
            heldout_l2_untrained,
            heldout_l2_trained,
            final_loss,
        },
    ))
}
