//! Parameter storage, reusable layers and the auxiliary networks.
//!
//! Networks keep their weights in a [`ParamSet`] and describe their layers
//! with [`ParamId`] handles. A forward pass first binds the set into a graph,
//! either as trainable leaves or as constants, and then looks the handles up
//! in the resulting [`Bound`].

pub mod perceptual;
pub mod pose;
pub mod recognition;

use std::ops::Index;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::optim::Ranger;
use crate::rng::{normal_tensor, StreamRng};
use crate::tensor::{Scalar, Tensor};

pub use perceptual::PerceptualExtractor;
pub use pose::PoseRegressor;
pub use recognition::RecognitionNet;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every tensor to `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (n, t) in self.names.iter().zip(&self.tensors) {
            eat(n.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            nt.insert_float(n.clone(), t);
        }
        nt
    }

    /// Overwrites every parameter from `nt`, which must hold exactly the same
    /// names with the same shapes.
    pub fn load_named(&mut self, nt: &NamedTensors) -> Result<()> {
        if nt.len() != self.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                nt.len()
            )));
        }
        let mut loaded = Vec::with_capacity(self.len());
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let v: Tensor<T> = nt.float(n)?;
            if v.shape() != t.shape() {
                return Err(Error::format(format!(
                    "parameter `{n}` has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            loaded.push(v);
        }
        self.tensors = loaded;
        Ok(())
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Handles in [`ParamSet`] order, as produced by `bind`.
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// One optimizer update: builds the loss with `params` bound as trainable
/// leaves, back-propagates and applies `opt`. Returns the loss value.
pub fn train_step<T: Scalar>(
    params: &mut ParamSet<T>,
    opt: &mut Ranger<T>,
    build: impl FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<T>> = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    opt.step(params.tensors_mut(), &grads)?;
    Ok(value)
}

fn he_normal<T: Scalar>(rng: &mut StreamRng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Convolution with bias and an optional leaky activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub slope: Option<f64>,
}

impl ConvBlock {
    /// `k x k` kernel with "same" padding, He-initialized, leaky 0.2.
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut StreamRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let kernel = ps.add(
            format!("{name}.weight"),
            he_normal(rng, vec![cout, cin, k, k], cin * k * k),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvBlock {
            kernel,
            bias,
            stride,
            padding: k / 2,
            slope: Some(LEAKY_SLOPE),
        }
    }

    pub fn linear_output(mut self) -> Self {
        self.slope = None;
        self
    }

    pub fn out_channels<T: Scalar>(&self, ps: &ParamSet<T>) -> usize {
        ps.get(self.kernel).shape()[0]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.kernel], Some(p[self.bias]), self.stride, self.padding)?;
        Ok(match self.slope {
            Some(s) => g.leaky_relu(y, s),
            None => y,
        })
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from N(0, gain² / fan_in).
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut StreamRng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            normal_tensor(rng, vec![din, dout], gain / (din as f64).sqrt()),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dout]));
        Linear { weight, bias }
    }

    pub fn zeros<T: Scalar>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros(vec![din, dout]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dout]));
        Linear { weight, bias }
    }

    pub fn out_features<T: Scalar>(&self, ps: &ParamSet<T>) -> usize {
        ps.get(self.weight).shape()[1]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Spatial average of `[N, C, H, W]` as `[N, C]`.
pub fn global_mean_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let m = g.channel_mean(x)?;
    g.reshape(m, &s[..2])
}

/// Divides every feature vector along the channel axis by its norm.
pub fn channel_unit_normalize<T: Scalar>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    let sq = g.square(x);
    let n2 = g.sum_axis(sq, 1)?;
    let n2 = g.add_scalar(n2, eps);
    let n = g.sqrt(n2);
    g.div(x, n)
}

/// Central crop of `[N, C, H, W]` keeping `frac` of each side.
pub fn center_crop<T: Scalar>(g: &mut Graph<T>, x: Var, frac: f64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    let (ch, cw) = (
        ((h as f64 * frac).round() as usize).clamp(1, h),
        ((w as f64 * frac).round() as usize).clamp(1, w),
    );
    let y = g.slice(x, 2, (h - ch) / 2, ch)?;
    g.slice(y, 3, (w - cw) / 2, cw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::RangerConfig;
    use crate::rng::rng_fork;

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamSet::<f32>::new();
        a.add("w", Tensor::full(vec![2], 1.0));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.tensors_mut()[0].data_mut()[1] = 1.0000001;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamSet::<f32>::new();
        c.add("v", Tensor::full(vec![2], 1.0));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn named_round_trip_and_mismatch() {
        let mut rng = rng_fork(1, 1);
        let mut ps = ParamSet::<f32>::new();
        ConvBlock::new(&mut ps, &mut rng, "c", 3, 4, 3, 1);
        let nt = ps.to_named();
        let mut other = ParamSet::<f32>::new();
        ConvBlock::new(&mut other, &mut rng_fork(2, 2), "c", 3, 4, 3, 1);
        other.load_named(&nt).unwrap();
        assert_eq!(other, ps);
        let mut wrong = ParamSet::<f32>::new();
        ConvBlock::new(&mut wrong, &mut rng, "c", 3, 5, 3, 1);
        assert!(wrong.load_named(&nt).is_err());
    }

    #[test]
    fn conv_block_shapes() {
        let mut rng = rng_fork(1, 1);
        let mut ps = ParamSet::<f32>::new();
        let c = ConvBlock::new(&mut ps, &mut rng, "c", 3, 8, 3, 2);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(&Tensor::zeros(vec![1, 3, 64, 64]));
        let y = c.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 32, 32]);
    }

    #[test]
    fn channel_normalized_features_have_unit_norm() {
        let mut rng = rng_fork(4, 4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(&normal_tensor(&mut rng, vec![2, 5, 3, 3], 1.0));
        let y = channel_unit_normalize(&mut g, x, 1e-12).unwrap();
        let sq = g.square(y);
        let n = g.sum_axis(sq, 1).unwrap();
        assert!(g.value(n).data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn train_step_fits_a_line() {
        let mut rng = rng_fork(3, 3);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, &mut rng, "l", 1, 1, 1.0);
        let cfg = RangerConfig {
            lr: 0.05,
            ..RangerConfig::default()
        };
        let mut opt = Ranger::new(ps.tensors(), cfg).unwrap();
        let xs = Tensor::new(vec![4, 1], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let ys = xs.map(|&x| 3.0 * x - 1.0);
        let mut losses = Vec::new();
        for _ in 0..600 {
            let l = train_step(&mut ps, &mut opt, |g, p| {
                let x = g.constant(&xs);
                let t = g.constant(&ys);
                let y = lin.forward(g, p, x)?;
                let d = g.sub(y, t)?;
                let d2 = g.square(d);
                Ok(g.mean(d2))
            })
            .unwrap();
            losses.push(l);
        }
        assert!(losses[599] < 0.01 * losses[0], "{} -> {}", losses[0], losses[599]);
    }

    #[test]
    fn train_step_rejects_non_finite_loss() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::full(vec![1], 1.0));
        let mut opt = Ranger::new(ps.tensors(), RangerConfig::default()).unwrap();
        let before = ps.clone();
        let r = train_step(&mut ps, &mut opt, |g, p| {
            let x = g.mul_scalar(p[ParamId(0)], f64::NAN);
            Ok(g.sum(x))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(ps, before);
    }
}
