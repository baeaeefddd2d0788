//! Frozen random-feature perceptual distance.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::rng::{rng_fork, streams};
use crate::tensor::{Scalar, Tensor};

use super::{channel_unit_normalize, Bound, ConvBlock, ParamSet};

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const NORM_EPS: f64 = 1e-10;

/// Three conv stages with 2x average pooling between them. Weights are drawn
/// once from a seeded He-normal initializer and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T> {
    params: ParamSet<T>,
    stages: Vec<ConvBlock>,
}

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_fork(seed, streams::PERCEPTUAL_INIT);
        let mut params = ParamSet::new();
        let mut cin = 3;
        let stages = STAGE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = ConvBlock::new(&mut params, &mut rng, &format!("stage{i}"), cin, c, 3, 1);
                cin = c;
                b
            })
            .collect();
        PerceptualExtractor { params, stages }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn cast<U: Scalar>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            params: self.params.cast(),
            stages: self.stages.clone(),
        }
    }

    /// Binds the weights as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Channel-normalized features of every stage for images in `[0, 1]`.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("perceptual", format!("expected [N, 3, H, W], got {s:?}")));
        }
        let x2 = g.mul_scalar(x, 2.0);
        let mut h = g.add_scalar(x2, -1.0);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2x(h)?;
            }
            h = stage.forward(g, p, h)?;
            out.push(channel_unit_normalize(g, h, NORM_EPS)?);
        }
        Ok(out)
    }

    /// Batch mean of the per-image distance between feature lists.
    pub fn distance_between(&self, g: &mut Graph<T>, fa: &[Var], fb: &[Var]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (&a, &b) in fa.iter().zip(fb) {
            let d = g.sub(a, b)?;
            let d2 = g.square(d);
            let per_pixel = g.sum_axis(d2, 1)?;
            let stage = g.mean(per_pixel);
            total = Some(match total {
                Some(t) => g.add(t, stage)?,
                None => stage,
            });
        }
        total.ok_or_else(|| Error::invalid("no perceptual stages"))
    }

    /// Distance between two `[N, 3, H, W]` graph images.
    pub fn distance_graph(&self, g: &mut Graph<T>, p: &Bound, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape(
                "perceptual_distance",
                format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
            ));
        }
        let fa = self.features(g, p, a)?;
        let fb = self.features(g, p, b)?;
        self.distance_between(g, &fa, &fb)
    }

    /// Distance between two images, `[3, H, W]` or `[N, 3, H, W]`.
    pub fn distance(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
        let batch = |t: &Tensor<T>| {
            if t.rank() == 3 {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.reshape(s)
            } else {
                Ok(t.clone())
            }
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let va = g.constant(&batch(a)?);
        let vb = g.constant(&batch(b)?);
        let d = self.distance_graph(&mut g, &p, va, vb)?;
        Ok(g.value(d).item())
    }

    pub fn to_named(&self) -> NamedTensors {
        self.params.to_named()
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let mut f = Self::new(0);
        f.params.load_named(nt)?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = rng_fork(seed, 77);
        normal_tensor::<f64, _>(&mut rng, vec![3, 16, 16], 0.3).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn identical_inputs_give_zero() {
        let f = PerceptualExtractor::<f64>::new(1);
        assert_eq!(f.distance(&image(1), &image(1)).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_positive() {
        let f = PerceptualExtractor::<f64>::new(1);
        for s in 0..5 {
            let (a, b) = (image(s), image(s + 100));
            let d = f.distance(&a, &b).unwrap();
            assert!(d > 0.0);
            assert_eq!(d, f.distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PerceptualExtractor::<f32>::new(9);
        assert_eq!(
            a.params().checksum(),
            PerceptualExtractor::<f32>::new(9).params().checksum()
        );
        assert_ne!(
            a.params().checksum(),
            PerceptualExtractor::<f32>::new(10).params().checksum()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = PerceptualExtractor::<f64>::new(1);
        let b = Tensor::zeros(vec![3, 8, 8]);
        assert!(f.distance(&image(0), &b).is_err());
    }
}
