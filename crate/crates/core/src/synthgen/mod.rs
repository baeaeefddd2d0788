//! The style-based generator G.
//!
//! A mapping MLP turns `z` into a style vector `w`. Synthesis starts from a
//! learned 4x4 constant and runs two style layers per resolution; each layer
//! is conv, per-pixel noise, leaky activation and AdaIN driven by its own
//! affine transform of one row of the latent code.

mod pretrain;

pub use pretrain::{generator_pairs, pretrain_generator, GeneratorReport, GeneratorTraining};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::netlib::{Bound, ConvBlock, Linear, ParamId, ParamSet, LEAKY_SLOPE};
use crate::ntf::NamedTensors;
use crate::rng::{normal_tensor, rng_fork, sample_stream, streams, StreamRng};
use crate::tensor::{Scalar, Tensor};

const ADAIN_EPS: f64 = 1e-5;
const PIXEL_NORM_EPS: f64 = 1e-8;
const AFFINE_GAIN: f64 = 0.5;
const MEAN_LATENT_CHUNK: usize = 512;

/// Style inputs of a generator of output side `resolution`.
pub fn num_styles(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!(
            "resolution must be a power of two >= 4, got {resolution}"
        )));
    }
    Ok(2 * (resolution.trailing_zeros() as usize - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    WPlus,
    WReplicated,
}

/// `n_styles x d` stack of style vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    styles: Tensor<T>,
    space: Space,
}

impl<T: Scalar> LatentCode<T> {
    pub fn w_plus(styles: Tensor<T>) -> Result<Self> {
        if styles.rank() != 2 || styles.is_empty() {
            return Err(Error::shape(
                "latent_code",
                format!("expected [n_styles, d], got {:?}", styles.shape()),
            ));
        }
        Ok(LatentCode {
            styles,
            space: Space::WPlus,
        })
    }

    /// `n_styles` copies of `w`.
    pub fn replicate(w: &[T], n_styles: usize) -> Result<Self> {
        if w.is_empty() || n_styles == 0 {
            return Err(Error::invalid("cannot replicate an empty style vector"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style vector to replicate".into()));
        }
        let data = (0..n_styles).flat_map(|_| w.iter().copied()).collect();
        Ok(LatentCode {
            styles: Tensor::new(vec![n_styles, w.len()], data)?,
            space: Space::WReplicated,
        })
    }

    /// Rebuilds a code, checking that replicated codes really have equal rows.
    pub fn from_parts(styles: Tensor<T>, space: Space) -> Result<Self> {
        let code = Self::w_plus(styles)?;
        if space == Space::WReplicated {
            let first = code.row(0);
            if (1..code.n_styles()).any(|i| code.row(i) != first) {
                return Err(Error::invalid("replicated code has differing rows"));
            }
        }
        Ok(LatentCode { space, ..code })
    }

    pub fn styles(&self) -> &Tensor<T> {
        &self.styles
    }

    pub fn into_styles(self) -> Tensor<T> {
        self.styles
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn n_styles(&self) -> usize {
        self.styles.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.styles.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.styles.data()[i * d..(i + 1) * d]
    }

    pub fn cast<U: Scalar>(&self) -> LatentCode<U> {
        LatentCode {
            styles: self.styles.cast(),
            space: self.space,
        }
    }
}

/// `w̄ + psi (w - w̄)` applied to every row.
pub fn truncate<T: Scalar>(code: &LatentCode<T>, psi: f64, w_avg: &[T]) -> Result<LatentCode<T>> {
    if w_avg.len() != code.dim() {
        return Err(Error::shape(
            "truncate",
            format!("code dim {} vs average of length {}", code.dim(), w_avg.len()),
        ));
    }
    // psi w + (1 - psi) w̄ keeps both endpoints exact in floating point
    let (a, b) = (T::of(psi), T::of(1.0 - psi));
    let d = code.dim();
    let styles = Tensor::from_fn(code.styles.shape().to_vec(), |i| {
        a * code.styles.data()[i] + b * w_avg[i % d]
    });
    Ok(LatentCode {
        styles,
        space: code.space,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_depth: usize,
    /// Feature channels at 4x4, 8x8, ... up to the output resolution.
    pub channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            latent_dim: 64,
            mapping_depth: 4,
            channels: vec![64, 64, 32, 16, 8],
        }
    }
}

impl GeneratorConfig {
    /// 16x16 configuration small enough for float64 gradient checks.
    pub fn mini() -> Self {
        GeneratorConfig {
            resolution: 16,
            latent_dim: 8,
            mapping_depth: 2,
            channels: vec![6, 4, 3],
        }
    }

    pub fn n_styles(&self) -> Result<usize> {
        num_styles(self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.n_styles()? / 2;
        if self.channels.len() != levels {
            return Err(Error::invalid(format!(
                "{} channel entries for {levels} resolutions",
                self.channels.len()
            )));
        }
        if self.latent_dim == 0 || self.mapping_depth == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("generator sizes must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel noise used by the synthesis layers.
pub enum Noise<'a> {
    Zero,
    /// Deterministic noise derived from a seed.
    Fixed(u64),
    /// Fresh draws from a caller-owned stream.
    Fresh(&'a mut StreamRng),
}

#[derive(Clone, Debug, PartialEq)]
struct StyleLayer {
    resolution: usize,
    channels: usize,
    upsample: bool,
    conv: Option<ConvBlock>,
    affine: Linear,
    noise_scale: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    mapping: Vec<Linear>,
    constant: ParamId,
    styles: Vec<StyleLayer>,
    to_rgb: ConvBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    layers: Layers,
    w_avg: Tensor<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_fork(seed, streams::GENERATOR_INIT);
        let mut ps = ParamSet::new();
        let d = config.latent_dim;
        let mapping = (0..config.mapping_depth)
            .map(|i| Linear::new(&mut ps, &mut rng, &format!("mapping{i}"), d, d, 2f64.sqrt()))
            .collect();
        let c0 = config.channels[0];
        let constant = ps.add("const", normal_tensor(&mut rng, vec![1, c0, 4, 4], 1.0));
        let mut styles = Vec::new();
        let mut cin = c0;
        for (level, &c) in config.channels.iter().enumerate() {
            let res = 4 << level;
            for j in 0..2 {
                let i = styles.len();
                let conv = if level == 0 && j == 0 {
                    None
                } else {
                    let cv = ConvBlock::new(&mut ps, &mut rng, &format!("layer{i}.conv"), cin, c, 3, 1);
                    Some(cv.linear_output())
                };
                let affine = Linear::new(&mut ps, &mut rng, &format!("layer{i}.affine"), d, 2 * c, AFFINE_GAIN);
                let noise_scale = ps.add(format!("layer{i}.noise"), Tensor::zeros(vec![1, c, 1, 1]));
                styles.push(StyleLayer {
                    resolution: res,
                    channels: c,
                    upsample: level > 0 && j == 0,
                    conv,
                    affine,
                    noise_scale,
                });
                cin = c;
            }
        }
        let to_rgb = ConvBlock::new(&mut ps, &mut rng, "to_rgb", cin, 3, 1, 1).linear_output();
        Ok(Generator {
            w_avg: Tensor::zeros(vec![d]),
            config,
            params: ps,
            layers: Layers {
                mapping,
                constant,
                styles,
                to_rgb,
            },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn n_styles(&self) -> usize {
        self.layers.styles.len()
    }

    /// Output resolution that style row `i` modulates.
    pub fn style_resolution(&self, i: usize) -> usize {
        self.layers.styles[i].resolution
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn w_avg(&self) -> &[T] {
        self.w_avg.data()
    }

    pub fn set_w_avg(&mut self, w: Tensor<T>) -> Result<()> {
        if w.shape() != [self.latent_dim()] {
            return Err(Error::shape("set_w_avg", format!("{:?}", w.shape())));
        }
        self.w_avg = w;
        Ok(())
    }

    /// Checksum over weights and the stored average latent.
    pub fn checksum(&self) -> u64 {
        let mut h = self.params.checksum();
        for v in self.w_avg.data() {
            h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            w_avg: self.w_avg.cast(),
        }
    }

    /// Binds the weights as constants, the mode used whenever G is frozen.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// `f(z)` for `z: [N, d]`.
    pub fn mapping_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.layers.mapping(g, p, z, self.latent_dim())
    }

    /// Images `[N, 3, R, R]` from codes `[N, n_styles, d]`.
    pub fn synthesis_graph(&self, g: &mut Graph<T>, p: &Bound, codes: Var, noise: Noise<'_>) -> Result<Var> {
        let s = g.shape(codes).to_vec();
        if s.len() != 3 || s[1] != self.n_styles() || s[2] != self.latent_dim() {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "codes {s:?} do not match [N, {}, {}]",
                    self.n_styles(),
                    self.latent_dim()
                ),
            ));
        }
        let rows = (0..s[1])
            .map(|i| {
                let r = g.slice(codes, 1, i, 1)?;
                g.reshape(r, &[s[0], s[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        self.layers.synthesis(g, p, &rows, noise)
    }

    /// Images from one `[N, d]` style vector shared by every layer.
    pub fn synthesis_replicated(&self, g: &mut Graph<T>, p: &Bound, w: Var, noise: Noise<'_>) -> Result<Var> {
        let s = g.shape(w);
        if s.len() != 2 || s[1] != self.latent_dim() {
            return Err(Error::shape(
                "synthesize",
                format!("styles {s:?}, d = {}", self.latent_dim()),
            ));
        }
        let rows = vec![w; self.n_styles()];
        self.layers.synthesis(g, p, &rows, noise)
    }

    /// Image `[3, R, R]` for one code.
    pub fn synthesize(&self, code: &LatentCode<T>, noise: Noise<'_>) -> Result<Tensor<T>> {
        Ok(self.synthesize_batch(std::slice::from_ref(code), noise)?.select(0))
    }

    pub fn synthesize_batch(&self, codes: &[LatentCode<T>], noise: Noise<'_>) -> Result<Tensor<T>> {
        if let Some(c) = codes
            .iter()
            .find(|c| c.n_styles() != self.n_styles() || c.dim() != self.latent_dim())
        {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "code is {}x{}, generator expects {}x{}",
                    c.n_styles(),
                    c.dim(),
                    self.n_styles(),
                    self.latent_dim()
                ),
            ));
        }
        let stacked = Tensor::stack(&codes.iter().map(|c| c.styles.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(&stacked);
        let y = self.synthesis_graph(&mut g, &p, x, noise)?;
        Ok(g.value(y).clone())
    }

    /// `f(z)` for each row of `z: [N, d]`.
    pub fn map(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(z);
        let w = self.mapping_graph(&mut g, &p, x)?;
        Ok(g.value(w).clone())
    }

    /// Averages `f(z)` over `k` standard-normal draws and stores the result.
    pub fn estimate_mean_latent(&mut self, k: usize, seed: u64) -> Result<&[T]> {
        if k == 0 {
            return Err(Error::invalid("mean latent needs at least one sample"));
        }
        let d = self.latent_dim();
        let mut rng = rng_fork(seed, streams::MEAN_LATENT);
        let mut acc = vec![0.0f64; d];
        let mut left = k;
        while left > 0 {
            let n = left.min(MEAN_LATENT_CHUNK);
            let z = normal_tensor::<T, _>(&mut rng, vec![n, d], 1.0);
            let w = self.map(&z)?;
            for row in w.data().chunks(d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            left -= n;
        }
        // a single f32 sample survives the f64 round trip exactly
        let w_avg = Tensor::new(vec![d], acc.iter().map(|a| T::of(a / k as f64)).collect())?;
        self.w_avg = w_avg;
        Ok(self.w_avg.data())
    }

    /// Image of the replicated average latent.
    pub fn mean_image(&self) -> Result<Tensor<T>> {
        self.synthesize(&LatentCode::replicate(self.w_avg(), self.n_styles())?, Noise::Zero)
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = self.params.to_named();
        let w_avg: Vec<f64> = self.w_avg.data().iter().map(|v| v.as_f64()).collect();
        nt.insert_json(
            "meta",
            &serde_json::json!({
                "resolution": self.config.resolution,
                "latent_dim": self.config.latent_dim,
                "n_styles": self.n_styles(),
                "mapping_depth": self.config.mapping_depth,
                "channels": self.config.channels,
                "w_avg": w_avg,
            }),
        );
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            resolution: usize,
            latent_dim: usize,
            n_styles: usize,
            mapping_depth: usize,
            channels: Vec<usize>,
            w_avg: Vec<f64>,
        }
        let meta: Meta = serde_json::from_value(nt.json("meta")?)?;
        let config = GeneratorConfig {
            resolution: meta.resolution,
            latent_dim: meta.latent_dim,
            mapping_depth: meta.mapping_depth,
            channels: meta.channels,
        };
        let mut gen = Self::new(config, 0)?;
        if gen.n_styles() != meta.n_styles {
            return Err(Error::format(format!(
                "meta says {} styles, resolution {} implies {}",
                meta.n_styles,
                meta.resolution,
                gen.n_styles()
            )));
        }
        let mut weights = nt.clone();
        weights.remove("meta");
        gen.params.load_named(&weights)?;
        gen.set_w_avg(Tensor::new(
            vec![meta.w_avg.len()],
            meta.w_avg.iter().map(|&v| T::of(v)).collect(),
        )?)?;
        Ok(gen)
    }
}

impl Layers {
    fn mapping<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var, d: usize) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape("mapping", format!("expected [N, {d}], got {s:?}")));
        }
        // pixel norm: z / rms(z)
        let unit = g.l2_normalize(z, PIXEL_NORM_EPS)?;
        let mut h = g.mul_scalar(unit, (d as f64).sqrt());
        for l in &self.mapping {
            let y = l.forward(g, p, h)?;
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(h)
    }

    fn synthesis<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, rows: &[Var], mut noise: Noise<'_>) -> Result<Var> {
        let n = g.shape(rows[0])[0];
        let mut x = p[self.constant];
        for (i, (layer, &w)) in self.styles.iter().zip(rows).enumerate() {
            if layer.upsample {
                x = g.upsample2x(x)?;
            }
            if let Some(conv) = &layer.conv {
                x = conv.forward(g, p, x)?;
            }
            let side = layer.resolution;
            let draw = match &mut noise {
                Noise::Zero => None,
                Noise::Fixed(seed) => {
                    let mut rng = rng_fork(*seed, sample_stream(streams::NOISE, i as u64));
                    Some(normal_tensor::<T, _>(&mut rng, vec![n, 1, side, side], 1.0))
                }
                Noise::Fresh(rng) => Some(normal_tensor::<T, _>(*rng, vec![n, 1, side, side], 1.0)),
            };
            if let Some(t) = draw {
                let nz = g.constant(&t);
                let scaled = g.mul(nz, p[layer.noise_scale])?;
                x = g.add(x, scaled)?;
            }
            x = g.leaky_relu(x, LEAKY_SLOPE);
            x = adain(g, p, layer, x, w, n)?;
        }
        let rgb = self.to_rgb.forward(g, p, x)?;
        Ok(g.sigmoid(rgb))
    }
}

fn adain<T: Scalar>(g: &mut Graph<T>, p: &Bound, layer: &StyleLayer, x: Var, w: Var, n: usize) -> Result<Var> {
    let c = layer.channels;
    let (mean, std) = g.instance_stats(x, ADAIN_EPS)?;
    let centered = g.sub(x, mean)?;
    let normed = g.div(centered, std)?;
    let style = layer.affine.forward(g, p, w)?;
    let scale = g.slice(style, 1, 0, c)?;
    let scale = g.reshape(scale, &[n, c, 1, 1])?;
    let scale = g.add_scalar(scale, 1.0);
    let bias = g.slice(style, 1, c, c)?;
    let bias = g.reshape(bias, &[n, c, 1, 1])?;
    let y = g.mul(normed, scale)?;
    g.add(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_code(gen: &Generator<f64>, seed: u64) -> LatentCode<f64> {
        let mut rng = rng_fork(seed, 99);
        let z = normal_tensor::<f64, _>(&mut rng, vec![1, gen.latent_dim()], 1.0);
        let w = gen.map(&z).unwrap();
        LatentCode::replicate(w.data(), gen.n_styles()).unwrap()
    }

    #[test]
    fn style_counts() {
        assert_eq!(num_styles(1024).unwrap(), 18);
        assert_eq!(num_styles(4).unwrap(), 2);
        assert_eq!(num_styles(64).unwrap(), 10);
        for bad in [0, 2, 3, 48, 100] {
            assert!(num_styles(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn one_affine_per_style() {
        let gen = Generator::<f32>::new(GeneratorConfig::default(), 1).unwrap();
        assert_eq!(gen.n_styles(), 10);
        let affines = gen
            .params()
            .names()
            .iter()
            .filter(|n| n.contains(".affine.weight"))
            .count();
        assert_eq!(affines, 10);
        let res: Vec<usize> = (0..10).map(|i| gen.style_resolution(i)).collect();
        assert_eq!(res, [4, 4, 8, 8, 16, 16, 32, 32, 64, 64]);
    }

    #[test]
    fn synthesize_shape_range_and_determinism() {
        let gen = Generator::<f64>::new(GeneratorConfig::mini(), 3).unwrap();
        let code = random_code(&gen, 1);
        let a = gen.synthesize(&code, Noise::Zero).unwrap();
        assert_eq!(a.shape(), [3, 16, 16]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, gen.synthesize(&code, Noise::Zero).unwrap());
        let f = gen.synthesize(&code, Noise::Fixed(5)).unwrap();
        assert_eq!(f, gen.synthesize(&code, Noise::Fixed(5)).unwrap());
    }

    #[test]
    fn noise_modes_differ_once_scales_are_nonzero() {
        let mut gen = Generator::<f64>::new(GeneratorConfig::mini(), 3).unwrap();
        for t in gen.params_mut().tensors_mut() {
            if t.shape().len() == 4 && t.shape()[0] == 1 && t.shape()[2] == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.3);
            }
        }
        let code = random_code(&gen, 1);
        let zero = gen.synthesize(&code, Noise::Zero).unwrap();
        let fixed = gen.synthesize(&code, Noise::Fixed(5)).unwrap();
        let mut rng = rng_fork(1, 2);
        let fresh1 = gen.synthesize(&code, Noise::Fresh(&mut rng)).unwrap();
        let fresh2 = gen.synthesize(&code, Noise::Fresh(&mut rng)).unwrap();
        assert_ne!(zero, fixed);
        assert_ne!(fresh1, fresh2);
    }

    #[test]
    fn wrong_row_count_rejected() {
        let gen = Generator::<f64>::new(GeneratorConfig::mini(), 3).unwrap();
        let code = LatentCode::replicate(&[0.0; 8], 5).unwrap();
        assert!(gen.synthesize(&code, Noise::Zero).is_err());
        let code = LatentCode::replicate(&[0.0; 7], 6).unwrap();
        assert!(gen.synthesize(&code, Noise::Zero).is_err());
    }

    #[test]
    fn fine_rows_act_locally() {
        let gen = Generator::<f64>::new(GeneratorConfig::default(), 4).unwrap();
        let fine: Vec<usize> = (0..gen.n_styles()).filter(|&i| gen.style_resolution(i) >= 64).collect();
        let (mut full, mut coarse) = (0.0, 0.0);
        for t in 0..20 {
            let a = random_code(&gen, 2 * t);
            let b = random_code(&gen, 2 * t + 1);
            let mut mixed = a.styles().clone();
            let d = gen.latent_dim();
            for &i in &fine {
                mixed.data_mut()[i * d..(i + 1) * d].copy_from_slice(b.row(i));
            }
            let mixed = LatentCode::w_plus(mixed).unwrap();
            let ia = gen.synthesize(&a, Noise::Zero).unwrap();
            let ib = gen.synthesize(&mixed, Noise::Zero).unwrap();
            assert_ne!(ia, ib);
            full += ia.mse(&ib).unwrap();
            coarse += pool4(&ia).mse(&pool4(&ib)).unwrap();
        }
        assert!(coarse < full, "{coarse} vs {full}");
    }

    fn pool4(x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let s = x.shape();
        let v = g.constant(&x.reshape(vec![1, s[0], s[1], s[2]]).unwrap());
        let a = g.avg_pool2x(v).unwrap();
        let b = g.avg_pool2x(a).unwrap();
        g.value(b).clone()
    }

    #[test]
    fn mean_latent_of_one_sample_is_that_sample() {
        let mut gen = Generator::<f32>::new(GeneratorConfig::default(), 2).unwrap();
        let mut rng = rng_fork(11, streams::MEAN_LATENT);
        let z = normal_tensor::<f32, _>(&mut rng, vec![1, 64], 1.0);
        let expect = gen.map(&z).unwrap().into_vec();
        assert_eq!(gen.estimate_mean_latent(1, 11).unwrap(), &expect[..]);
        assert!(gen.estimate_mean_latent(0, 11).is_err());
    }

    #[test]
    fn mean_latent_estimates_agree_within_clt_bound() {
        let mut gen = Generator::<f64>::new(GeneratorConfig::default(), 2).unwrap();
        let k = 10_000;
        let a = gen.estimate_mean_latent(k, 1).unwrap().to_vec();
        let b = gen.estimate_mean_latent(k, 2).unwrap().to_vec();
        // per-coordinate spread measured on a third independent batch
        let mut rng = rng_fork(3, streams::MEAN_LATENT);
        let w = gen.map(&normal_tensor::<f64, _>(&mut rng, vec![k, 64], 1.0)).unwrap();
        for j in 0..64 {
            let col: Vec<f64> = w.data().iter().skip(j).step_by(64).copied().collect();
            let m = col.iter().sum::<f64>() / k as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
            assert!((a[j] - b[j]).abs() < 5.0 * sd / (k as f64).sqrt(), "coord {j}");
        }
    }

    #[test]
    fn truncation_identities() {
        let gen = Generator::<f64>::new(GeneratorConfig::mini(), 1).unwrap();
        let code = random_code(&gen, 4);
        let w_avg: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        assert_eq!(truncate(&code, 1.0, &w_avg).unwrap(), code);
        let zero = truncate(&code, 0.0, &w_avg).unwrap();
        for i in 0..code.n_styles() {
            assert_eq!(zero.row(i), &w_avg[..]);
        }
        let half = truncate(&code, 0.5, &w_avg).unwrap();
        for (i, v) in half.styles().data().iter().enumerate() {
            let expect = (w_avg[i % 8] + code.styles().data()[i]) / 2.0;
            assert!((v - expect).abs() < 1e-15);
        }
        assert!(truncate(&code, 0.5, &w_avg[..4]).is_err());
    }

    #[test]
    fn mapping_of_zero_is_finite() {
        let gen = Generator::<f32>::new(GeneratorConfig::default(), 1).unwrap();
        assert!(gen.map(&Tensor::zeros(vec![1, 64])).unwrap().is_finite());
    }

    #[test]
    fn replicated_codes_have_equal_rows() {
        let code = LatentCode::replicate(&[1.0f32, 2.0, 3.0], 10).unwrap();
        assert_eq!(code.space(), Space::WReplicated);
        assert!((0..10).all(|i| code.row(i) == [1.0, 2.0, 3.0]));
        let mut s = code.styles().clone();
        s.data_mut()[5] = 0.0;
        assert!(LatentCode::from_parts(s, Space::WReplicated).is_err());
    }

    #[test]
    fn named_round_trip() {
        let mut gen = Generator::<f32>::new(GeneratorConfig::default(), 6).unwrap();
        gen.estimate_mean_latent(100, 1).unwrap();
        let bytes = gen.to_named().to_bytes().unwrap();
        let back = Generator::<f32>::from_named(&NamedTensors::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, gen);
        assert_eq!(back.checksum(), gen.checksum());
    }
}
