//! Central finite-difference verification of the autodiff engine.
//!
//! Every check projects the output onto a fixed random weight tensor, so the
//! scalar being differentiated depends on every output element. Numeric
//! derivatives only ever call the forward path.

use rand::Rng;

use crate::autograd::{Graph, Primitive, Var};
use crate::error::Result;
use crate::losses::{total_loss, LossNets, LossWeights};
use crate::netlib::{Bound, PerceptualExtractor, RecognitionNet};
use crate::psp::{psp_forward_graph, Encoder, EncoderConfig, Variant};
use crate::rng::{normal_tensor, rng_fork, StreamRng};
use crate::synthgen::{Generator, GeneratorConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub points: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `max |analytic - numeric| / max(max |numeric|, 1e-8)` over one tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval(build: &Builder, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = build(&mut g, &vars)?;
    let l = project(&mut g, out, weights)?;
    Ok(g.value(l).item())
}

/// Max relative error over all inputs flagged in `differentiate`.
pub fn check_function(
    build: &Builder,
    inputs: &[Tensor<f64>],
    differentiate: &[bool],
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiate)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let out = build(&mut g, &vars)?;
    let weights = normal_tensor::<f64, _>(rng, g.shape(out).to_vec(), 1.0);
    let l = project(&mut g, out, &weights)?;
    let grads = g.backward(l)?;

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        if !differentiate[i] {
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] = t.data()[j] + FD_STEP;
            let up = eval(build, &shifted, &weights)?;
            shifted[i].data_mut()[j] = t.data()[j] - FD_STEP;
            let down = eval(build, &shifted, &weights)?;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn randn(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(rng, shape.to_vec(), 1.0)
}

/// Normal draws pushed at least `margin` away from zero.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize], margin: f64) -> Tensor<f64> {
    randn(rng, shape).map(|&v| {
        if v.abs() < margin {
            if v < 0.0 {
                v - margin
            } else {
                v + margin
            }
        } else {
            v
        }
    })
}

fn positive(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.5..2.0))
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    differentiate: Vec<bool>,
    build: Box<Builder<'static>>,
}

fn case(prim: Primitive, rng: &mut StreamRng) -> Case {
    let all = |n: usize| vec![true; n];
    let (inputs, build): (Vec<Tensor<f64>>, Box<Builder>) = match prim {
        Primitive::MatMul => (
            vec![randn(rng, &[3, 4]), randn(rng, &[4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        Primitive::Conv2d => (
            vec![randn(rng, &[2, 2, 5, 5]), randn(rng, &[3, 2, 3, 3]), randn(rng, &[3])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        Primitive::Upsample2x => (vec![randn(rng, &[1, 2, 3, 3])], Box::new(|g, v| g.upsample2x(v[0]))),
        Primitive::ResizeBilinear => (
            vec![randn(rng, &[1, 2, 6, 5])],
            Box::new(|g, v| {
                let up = g.upsample2x_bilinear(v[0])?;
                g.resize_bilinear(up, 4, 7)
            }),
        ),
        Primitive::AvgPool2x => (vec![randn(rng, &[1, 2, 4, 6])], Box::new(|g, v| g.avg_pool2x(v[0]))),
        Primitive::LeakyRelu => (
            vec![away_from_zero(rng, &[3, 4], 1e-3)],
            Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))),
        ),
        Primitive::Sigmoid => (vec![randn(rng, &[3, 4])], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        Primitive::Add => (
            vec![randn(rng, &[2, 3, 4]), randn(rng, &[1, 3, 1])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        Primitive::Sub => (
            vec![randn(rng, &[2, 3, 4]), randn(rng, &[4])],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        Primitive::Mul => (
            vec![randn(rng, &[2, 3, 4]), randn(rng, &[2, 1, 4])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        Primitive::Div => (
            vec![randn(rng, &[2, 3]), positive(rng, &[2, 1])],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        Primitive::AddScalar => (vec![randn(rng, &[5])], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.75)))),
        Primitive::MulScalar => (vec![randn(rng, &[5])], Box::new(|g, v| Ok(g.mul_scalar(v[0], -1.5)))),
        Primitive::Sum => (vec![randn(rng, &[3, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        Primitive::Mean => (vec![randn(rng, &[3, 3])], Box::new(|g, v| Ok(g.mean(v[0])))),
        Primitive::SumAxis => (vec![randn(rng, &[2, 3, 4])], Box::new(|g, v| g.sum_axis(v[0], 1))),
        Primitive::ChannelMean => (vec![randn(rng, &[2, 3, 3, 4])], Box::new(|g, v| g.channel_mean(v[0]))),
        Primitive::ChannelStd => (
            vec![randn(rng, &[2, 3, 3, 4])],
            Box::new(|g, v| g.channel_std(v[0], 1e-8)),
        ),
        Primitive::Concat => (
            vec![randn(rng, &[2, 1, 3]), randn(rng, &[2, 2, 3])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        Primitive::Reshape => (vec![randn(rng, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        Primitive::Slice => (vec![randn(rng, &[2, 5, 3])], Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        Primitive::L2Normalize => (vec![randn(rng, &[3, 5])], Box::new(|g, v| g.l2_normalize(v[0], 1e-12))),
        Primitive::LogSoftmax => (vec![randn(rng, &[3, 5])], Box::new(|g, v| g.log_softmax(v[0]))),
        Primitive::Norm => (vec![randn(rng, &[2, 3, 4])], Box::new(|g, v| g.norm(v[0]))),
        Primitive::Sqrt => (vec![positive(rng, &[6])], Box::new(|g, v| Ok(g.sqrt(v[0])))),
        Primitive::Square => (vec![randn(rng, &[6])], Box::new(|g, v| Ok(g.square(v[0])))),
    };
    let differentiate = all(inputs.len());
    Case {
        inputs,
        differentiate,
        build,
    }
}

pub const ALL_PRIMITIVES: [Primitive; 26] = [
    Primitive::MatMul,
    Primitive::Conv2d,
    Primitive::Upsample2x,
    Primitive::ResizeBilinear,
    Primitive::AvgPool2x,
    Primitive::LeakyRelu,
    Primitive::Sigmoid,
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Div,
    Primitive::AddScalar,
    Primitive::MulScalar,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::SumAxis,
    Primitive::ChannelMean,
    Primitive::ChannelStd,
    Primitive::Concat,
    Primitive::Reshape,
    Primitive::Slice,
    Primitive::L2Normalize,
    Primitive::LogSoftmax,
    Primitive::Norm,
    Primitive::Sqrt,
    Primitive::Square,
];

/// Checks one primitive at `points` independent random inputs.
pub fn check_primitive(prim: Primitive, points: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng_fork(seed, 0x6772_6164 ^ prim as u64);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let c = case(prim, &mut rng);
        worst = worst.max(check_function(&*c.build, &c.inputs, &c.differentiate, &mut rng)?);
    }
    Ok(CheckReport {
        name: prim.to_string(),
        max_rel_err: worst,
        points,
    })
}

/// `total_loss ∘ psp_forward` on the 16×16 mini configuration under the
/// frontalization weights, which exercise every loss term. Checked with
/// respect to the input image and every encoder weight; the encoder is
/// perturbed off its zero-initialized heads so no gradient vanishes.
pub fn check_composition(seed: u64) -> Result<CheckReport> {
    let mut rng = rng_fork(seed, 0x636f_6d70);
    let mut gen = Generator::<f64>::new(GeneratorConfig::mini(), seed)?;
    gen.estimate_mean_latent(64, seed)?;
    let mut enc = Encoder::<f64>::new(EncoderConfig::mini(Variant::Psp, gen.latent_dim()), seed)?;
    for t in enc.params_mut().tensors_mut() {
        let noise = normal_tensor::<f64, _>(&mut rng, t.shape().to_vec(), 0.2);
        *t = t.zip_map(&noise, |a, b| a + b)?;
    }
    let perceptual = PerceptualExtractor::<f64>::new(seed);
    let recognition = RecognitionNet::<f64>::new(4, seed);
    let res = gen.resolution();
    let image = |rng: &mut StreamRng| Tensor::from_fn(vec![1, 3, res, res], |_| rng.random_range(0.05..0.95));
    let x = image(&mut rng);
    let target = image(&mut rng);
    let mask = Tensor::from_fn(vec![1, 1, res, res], |i| {
        let (r, c) = (i / res, i % res);
        if (4..12).contains(&r) && (5..11).contains(&c) {
            1.0
        } else {
            0.0
        }
    });

    let mut inputs = vec![x, target, mask];
    inputs.extend(enc.params().tensors().iter().cloned());
    let mut differentiate = vec![true, false, false];
    differentiate.resize(inputs.len(), true);
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let ep = Bound::from_vars(v[3..].to_vec());
        let gp = gen.bind(g);
        let out = psp_forward_graph(g, &enc, &ep, &gen, &gp, v[0])?;
        let nets = LossNets {
            perceptual: &perceptual,
            recognition: Some(&recognition),
        };
        Ok(total_loss(
            g,
            &nets,
            v[1],
            out.image,
            Some(out.offset),
            &LossWeights::FRONTALIZATION,
            Some(v[2]),
        )?
        .total)
    };
    Ok(CheckReport {
        name: "total_loss∘psp_forward".into(),
        max_rel_err: check_function(&build, &inputs, &differentiate, &mut rng)?,
        points: 1,
    })
}

pub fn check_all_primitives(points: usize, seed: u64) -> Result<Vec<CheckReport>> {
    ALL_PRIMITIVES
        .iter()
        .map(|&p| check_primitive(p, points, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for r in check_all_primitives(10, 7).unwrap() {
            assert!(r.passed(PRIMITIVE_TOLERANCE), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn encoder_and_loss_composition_matches_finite_differences() {
        let r = check_composition(3).unwrap();
        assert!(r.passed(COMPOSITION_TOLERANCE), "rel err {:e}", r.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x built from a constant copy has half the true gradient.
        let build: Box<Builder> = Box::new(|g, v| {
            let c = g.constant(&g.value(v[0]).clone());
            g.mul(v[0], c)
        });
        let mut rng = rng_fork(1, 1);
        let x = normal_tensor(&mut rng, vec![4], 1.0);
        let err = check_function(&*build, &[x], &[true], &mut rng).unwrap();
        assert!(err > 0.4, "{err}");
    }
}
