//! The pSp encoder and its two ablation variants.
//!
//! A residual backbone produces maps at input/4, input/8 and input/16, merged
//! top-down by 1x1 laterals. Each style row has its own map2style head on the
//! pyramid level chosen by [`StylePartition`]. The encoder predicts an offset
//! from w̄: `pSp(x) = G(E(x) + w̄)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::netlib::{global_mean_pool, Bound, ConvBlock, Linear, ParamSet, LEAKY_SLOPE};
use crate::ntf::NamedTensors;
use crate::rng::{rng_fork, streams};
use crate::synthgen::{num_styles, Generator, LatentCode, Noise, Space};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Psp,
    /// One style vector from the pooled backbone output, replicated.
    W,
    /// One linear layer on the pooled backbone output emitting every row.
    NaiveWplus,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Psp, Variant::W, Variant::NaiveWplus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Psp => "psp",
            Variant::W => "w",
            Variant::NaiveWplus => "naive_wplus",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown encoder variant `{s}`")))
    }
}

/// Pyramid level feeding a style row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Small map (input/16): styles of resolutions 4 and 8.
    Coarse,
    /// Medium map (input/8): resolutions 16 and 32.
    Medium,
    /// Large map (input/4): resolutions 64 and up.
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Medium, Level::Fine];

    /// Downsampling factor of this level's map relative to the input.
    pub fn stride(self) -> usize {
        match self {
            Level::Coarse => 16,
            Level::Medium => 8,
            Level::Fine => 4,
        }
    }
}

/// Resolution-based assignment of style rows to pyramid levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StylePartition {
    levels: Vec<Level>,
}

impl StylePartition {
    pub fn for_resolution(resolution: usize) -> Result<Self> {
        let n = num_styles(resolution)?;
        let levels = (0..n)
            .map(|i| match 4usize << (i / 2) {
                r if r <= 8 => Level::Coarse,
                r if r <= 32 => Level::Medium,
                _ => Level::Fine,
            })
            .collect();
        Ok(StylePartition { levels })
    }

    pub fn n_styles(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, style: usize) -> Level {
        self.levels[style]
    }

    /// Contiguous style indices of `level`, possibly empty.
    pub fn indices(&self, level: Level) -> Range<usize> {
        let start = self.levels.iter().position(|&l| l == level);
        match start {
            Some(s) => s..s + self.levels.iter().filter(|&&l| l == level).count(),
            None => self.levels.len()..self.levels.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub resolution: usize,
    pub in_channels: usize,
    pub latent_dim: usize,
    /// Stem width, then the widths of the input/4, /8 and /16 stages.
    pub widths: [usize; 4],
    /// Width of the pyramid and of every map2style head.
    pub pyramid_channels: usize,
}

impl EncoderConfig {
    /// Desk-scale encoder matching a generator.
    pub fn for_generator(variant: Variant, resolution: usize, latent_dim: usize, in_channels: usize) -> Self {
        EncoderConfig {
            variant,
            resolution,
            in_channels,
            latent_dim,
            widths: [16, 32, 48, 64],
            pyramid_channels: 32,
        }
    }

    /// Tiny encoder for float64 gradient checks at 16x16.
    pub fn mini(variant: Variant, latent_dim: usize) -> Self {
        EncoderConfig {
            variant,
            resolution: 16,
            in_channels: 3,
            latent_dim,
            widths: [3, 4, 4, 5],
            pyramid_channels: 4,
        }
    }

    pub fn n_styles(&self) -> Result<usize> {
        num_styles(self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        self.n_styles()?;
        if self.resolution < 16 {
            return Err(Error::invalid(format!(
                "encoder needs resolution >= 16 for its three pyramid levels, got {}",
                self.resolution
            )));
        }
        if self.in_channels == 0 || self.latent_dim == 0 || self.pyramid_channels == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    down: ConvBlock,
    res_a: ConvBlock,
    res_b: ConvBlock,
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.down.forward(g, p, x)?;
        let r = self.res_a.forward(g, p, h)?;
        let r = self.res_b.forward(g, p, r)?;
        let s = g.add(h, r)?;
        Ok(g.leaky_relu(s, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Map2Style {
    level: Level,
    convs: Vec<ConvBlock>,
    linear: Linear,
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Pyramid {
        /// Laterals for the /4, /8 and /16 stages.
        laterals: [ConvBlock; 3],
        heads: Vec<Map2Style>,
    },
    Single(Linear),
    /// A W vector as in `Single`, expanded by one more layer to all rows.
    Naive {
        feature: Linear,
        expand: Linear,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    stem: [ConvBlock; 2],
    stages: [Stage; 3],
    head: Head,
    n_styles: usize,
    latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
    layers: Layers,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_fork(seed, streams::ENCODER_INIT);
        let mut ps = ParamSet::new();
        let [w0, w1, w2, w3] = config.widths;
        let stem = [
            ConvBlock::new(&mut ps, &mut rng, "stem0", config.in_channels, w0, 3, 1),
            ConvBlock::new(&mut ps, &mut rng, "stem1", w0, w1, 3, 2),
        ];
        let mut stage = |name: &str, cin: usize, cout: usize| Stage {
            down: ConvBlock::new(&mut ps, &mut rng, &format!("{name}.down"), cin, cout, 3, 2),
            res_a: ConvBlock::new(&mut ps, &mut rng, &format!("{name}.res_a"), cout, cout, 3, 1),
            res_b: ConvBlock::new(&mut ps, &mut rng, &format!("{name}.res_b"), cout, cout, 3, 1).linear_output(),
        };
        let stages = [
            stage("stage1", w1, w1),
            stage("stage2", w1, w2),
            stage("stage3", w2, w3),
        ];
        let n_styles = config.n_styles()?;
        let d = config.latent_dim;
        let head = match config.variant {
            Variant::Psp => {
                let c = config.pyramid_channels;
                let laterals = [
                    ConvBlock::new(&mut ps, &mut rng, "lateral4", w1, c, 1, 1).linear_output(),
                    ConvBlock::new(&mut ps, &mut rng, "lateral8", w2, c, 1, 1).linear_output(),
                    ConvBlock::new(&mut ps, &mut rng, "lateral16", w3, c, 1, 1).linear_output(),
                ];
                let partition = StylePartition::for_resolution(config.resolution)?;
                let heads = (0..n_styles)
                    .map(|i| {
                        let level = partition.level(i);
                        let side = config.resolution / level.stride();
                        let convs = (0..side.trailing_zeros())
                            .map(|k| ConvBlock::new(&mut ps, &mut rng, &format!("style{i}.conv{k}"), c, c, 3, 2))
                            .collect();
                        let linear = Linear::zeros(&mut ps, &format!("style{i}.linear"), c, d);
                        Map2Style { level, convs, linear }
                    })
                    .collect();
                Head::Pyramid { laterals, heads }
            }
            Variant::W => Head::Single(Linear::zeros(&mut ps, "w_linear", w3, d)),
            Variant::NaiveWplus => Head::Naive {
                feature: Linear::new(&mut ps, &mut rng, "wplus_feature", w3, d, 1.0),
                expand: Linear::zeros(&mut ps, "wplus_expand", d, n_styles * d),
            },
        };
        Ok(Encoder {
            config,
            params: ps,
            layers: Layers {
                stem,
                stages,
                head,
                n_styles,
                latent_dim: d,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_styles(&self) -> usize {
        self.layers.n_styles
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.latent_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Number of map2style heads (zero for the ablation variants).
    pub fn head_count(&self) -> usize {
        match &self.layers.head {
            Head::Pyramid { heads, .. } => heads.len(),
            _ => 0,
        }
    }

    /// Conv depth of each map2style head.
    pub fn head_depths(&self) -> Vec<(Level, usize)> {
        match &self.layers.head {
            Head::Pyramid { heads, .. } => heads.iter().map(|h| (h.level, h.convs.len())).collect(),
            _ => Vec::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Offsets `[N, n_styles, d]` for inputs `[N, C, R, R]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.layers.forward(g, p, x, &self.config)
    }

    /// Shared-vector output `[N, d]` of the W variant.
    pub fn forward_w(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.variant() != Variant::W {
            return Err(Error::invalid(format!("encode_w on a {} encoder", self.variant())));
        }
        self.layers.check_input(g, x, &self.config)?;
        let pooled = self.layers.pooled(g, p, x)?;
        match &self.layers.head {
            Head::Single(l) => l.forward(g, p, pooled),
            _ => unreachable!("W variant has a single head"),
        }
    }

    /// Offset code `E(x)` for one `[C, R, R]` input.
    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentCode<T>> {
        let out = self.run(x, |e, g, p, v| e.forward(g, p, v))?;
        let styles = out.reshape(vec![self.n_styles(), self.latent_dim()])?;
        match self.variant() {
            Variant::W => LatentCode::from_parts(styles, Space::WReplicated),
            _ => LatentCode::w_plus(styles),
        }
    }

    /// The single style vector of a W encoder.
    pub fn encode_w(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(x, |e, g, p, v| e.forward_w(g, p, v))?;
        out.reshape(vec![self.latent_dim()])
    }

    /// The jointly emitted rows of a naive W+ encoder.
    pub fn encode_naive_wplus(&self, x: &Tensor<T>) -> Result<LatentCode<T>> {
        if self.variant() != Variant::NaiveWplus {
            return Err(Error::invalid(format!(
                "encode_naive_wplus on a {} encoder",
                self.variant()
            )));
        }
        self.encode(x)
    }

    fn run(
        &self,
        x: &Tensor<T>,
        f: impl FnOnce(&Self, &mut Graph<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        if x.rank() != 3 {
            return Err(Error::shape(
                "encode",
                format!("expected [C, H, W], got {:?}", x.shape()),
            ));
        }
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let v = g.constant(&x.reshape(s)?);
        let y = f(self, &mut g, &p, v)?;
        Ok(g.value(y).clone())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = self.params.to_named();
        nt.insert_json("meta", &serde_json::to_value(&self.config).expect("encoder config"));
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(nt.json("meta")?)?;
        let mut e = Self::new(config, 0)?;
        let mut weights = nt.clone();
        weights.remove("meta");
        e.params.load_named(&weights)?;
        Ok(e)
    }
}

impl Layers {
    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var, cfg: &EncoderConfig) -> Result<()> {
        let s = g.shape(x);
        let r = cfg.resolution;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != r || s[3] != r {
            return Err(Error::shape(
                "encode",
                format!("expected [N, {}, {r}, {r}], got {s:?}", cfg.in_channels),
            ));
        }
        Ok(())
    }

    /// Stage outputs at input/4, /8 and /16.
    fn backbone<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<[Var; 3]> {
        let mut h = x;
        for c in &self.stem {
            h = c.forward(g, p, h)?;
        }
        let c4 = self.stages[0].forward(g, p, h)?;
        let c8 = self.stages[1].forward(g, p, c4)?;
        let c16 = self.stages[2].forward(g, p, c8)?;
        Ok([c4, c8, c16])
    }

    fn pooled<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, _, c16] = self.backbone(g, p, x)?;
        global_mean_pool(g, c16)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, cfg: &EncoderConfig) -> Result<Var> {
        self.check_input(g, x, cfg)?;
        let n = g.shape(x)[0];
        let (s, d) = (self.n_styles, self.latent_dim);
        match &self.head {
            Head::Pyramid { laterals, heads } => {
                let [c4, c8, c16] = self.backbone(g, p, x)?;
                let small = laterals[2].forward(g, p, c16)?;
                let up = g.upsample2x_bilinear(small)?;
                let l8 = laterals[1].forward(g, p, c8)?;
                let medium = g.add(l8, up)?;
                let up = g.upsample2x_bilinear(medium)?;
                let l4 = laterals[0].forward(g, p, c4)?;
                let large = g.add(l4, up)?;
                let mut rows = Vec::with_capacity(s);
                for h in heads {
                    let mut f = match h.level {
                        Level::Coarse => small,
                        Level::Medium => medium,
                        Level::Fine => large,
                    };
                    for c in &h.convs {
                        f = c.forward(g, p, f)?;
                    }
                    let c = g.shape(f)[1];
                    let flat = g.reshape(f, &[n, c])?;
                    let w = h.linear.forward(g, p, flat)?;
                    rows.push(g.reshape(w, &[n, 1, d])?);
                }
                g.concat(&rows, 1)
            }
            Head::Single(l) => {
                let pooled = self.pooled(g, p, x)?;
                let w = l.forward(g, p, pooled)?;
                let w = g.reshape(w, &[n, 1, d])?;
                g.concat(&vec![w; s], 1)
            }
            Head::Naive { feature, expand } => {
                let pooled = self.pooled(g, p, x)?;
                let w = feature.forward(g, p, pooled)?;
                let w = expand.forward(g, p, w)?;
                g.reshape(w, &[n, s, d])
            }
        }
    }
}

/// Graph nodes of one `pSp` forward pass.
pub struct PspOutput {
    /// `[N, 3, R, R]` synthesized images.
    pub image: Var,
    /// `[N, n_styles, d]` encoder offsets `E(x)`.
    pub offset: Var,
    /// `[N, n_styles, d]` final codes `E(x) + w̄`.
    pub codes: Var,
}

pub fn check_compatible<T: Scalar>(e: &Encoder<T>, gen: &Generator<T>) -> Result<()> {
    if e.n_styles() != gen.n_styles() || e.latent_dim() != gen.latent_dim() {
        return Err(Error::shape(
            "psp_forward",
            format!(
                "encoder emits {}x{}, generator takes {}x{}",
                e.n_styles(),
                e.latent_dim(),
                gen.n_styles(),
                gen.latent_dim()
            ),
        ));
    }
    Ok(())
}

/// `G(E(x) + w̄)` with zero noise, built on bound encoder and generator weights.
pub fn psp_forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    e: &Encoder<T>,
    ep: &Bound,
    gen: &Generator<T>,
    gp: &Bound,
    x: Var,
) -> Result<PspOutput> {
    check_compatible(e, gen)?;
    let offset = e.forward(g, ep, x)?;
    let w_avg = g.constant(&Tensor::new(vec![gen.latent_dim()], gen.w_avg().to_vec())?);
    let codes = g.add(offset, w_avg)?;
    let image = gen.synthesis_graph(g, gp, codes, Noise::Zero)?;
    Ok(PspOutput { image, offset, codes })
}

/// Reconstruction `[3, R, R]` and final code for one input.
pub fn psp_forward<T: Scalar>(e: &Encoder<T>, gen: &Generator<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LatentCode<T>)> {
    let (images, codes) = psp_forward_batch(e, gen, std::slice::from_ref(x))?;
    Ok((images.select(0), codes.into_iter().next().expect("one code")))
}

pub fn psp_forward_batch<T: Scalar>(
    e: &Encoder<T>,
    gen: &Generator<T>,
    xs: &[Tensor<T>],
) -> Result<(Tensor<T>, Vec<LatentCode<T>>)> {
    let mut g = Graph::new();
    let ep = e.bind(&mut g, false);
    let gp = gen.bind(&mut g);
    let x = g.constant(&Tensor::stack(xs)?);
    let out = psp_forward_graph(&mut g, e, &ep, gen, &gp, x)?;
    let codes = g.value(out.codes);
    let space = match e.variant() {
        Variant::W => Space::WReplicated,
        _ => Space::WPlus,
    };
    let codes = (0..xs.len())
        .map(|i| LatentCode::from_parts(codes.select(i), space))
        .collect::<Result<_>>()?;
    Ok((g.value(out.image).clone(), codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;
    use crate::synthgen::GeneratorConfig;

    fn image(seed: u64, c: usize, r: usize) -> Tensor<f32> {
        let mut rng = rng_fork(seed, 5);
        normal_tensor::<f32, _>(&mut rng, vec![c, r, r], 0.3).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    fn perturbed(mut e: Encoder<f32>, seed: u64) -> Encoder<f32> {
        let mut rng = rng_fork(seed, 6);
        for t in e.params_mut().tensors_mut() {
            let noise = normal_tensor::<f32, _>(&mut rng, t.shape().to_vec(), 0.1);
            *t = t.zip_map(&noise, |a, b| a + b).unwrap();
        }
        e
    }

    #[test]
    fn partition_at_64() {
        let p = StylePartition::for_resolution(64).unwrap();
        assert_eq!(p.indices(Level::Coarse), 0..4);
        assert_eq!(p.indices(Level::Medium), 4..8);
        assert_eq!(p.indices(Level::Fine), 8..10);
        let mut all: Vec<usize> = Level::ALL.iter().flat_map(|&l| p.indices(l)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let p = StylePartition::for_resolution(1024).unwrap();
        assert_eq!(p.n_styles(), 18);
        assert_eq!(p.indices(Level::Fine), 8..18);
    }

    #[test]
    fn head_depths_follow_level_size() {
        let e = Encoder::<f32>::new(EncoderConfig::for_generator(Variant::Psp, 64, 64, 3), 1).unwrap();
        assert_eq!(e.head_count(), 10);
        for (level, depth) in e.head_depths() {
            let side = 64 / level.stride();
            assert_eq!(depth, side.trailing_zeros() as usize, "{level:?}");
        }
    }

    #[test]
    fn output_shape_and_zero_init() {
        for v in Variant::ALL {
            let e = Encoder::<f32>::new(EncoderConfig::for_generator(v, 64, 64, 3), 1).unwrap();
            for s in 0..3 {
                let code = e.encode(&image(s, 3, 64)).unwrap();
                assert_eq!(code.styles().shape(), [10, 64]);
                assert!(code.styles().data().iter().all(|&x| x == 0.0), "{v}");
            }
        }
    }

    #[test]
    fn wrong_resolution_or_channels_rejected() {
        let e = Encoder::<f32>::new(EncoderConfig::for_generator(Variant::Psp, 64, 64, 3), 1).unwrap();
        assert!(e.encode(&image(0, 3, 32)).is_err());
        assert!(e.encode(&image(0, 1, 64)).is_err());
        let e = Encoder::<f32>::new(EncoderConfig::for_generator(Variant::Psp, 64, 64, 6), 1).unwrap();
        assert!(e.encode(&image(0, 6, 64)).is_ok());
    }

    #[test]
    fn w_variant_replicates_one_vector() {
        let e = perturbed(
            Encoder::new(EncoderConfig::for_generator(Variant::W, 64, 64, 3), 1).unwrap(),
            2,
        );
        let x = image(3, 3, 64);
        let w = e.encode_w(&x).unwrap();
        assert_eq!(w.shape(), [64]);
        let code = e.encode(&x).unwrap();
        assert_eq!(code.space(), Space::WReplicated);
        for i in 0..10 {
            assert_eq!(code.row(i), w.data());
        }
    }

    #[test]
    fn naive_rows_differ_at_random_weights() {
        let e = perturbed(
            Encoder::new(EncoderConfig::for_generator(Variant::NaiveWplus, 64, 64, 3), 1).unwrap(),
            2,
        );
        let code = e.encode_naive_wplus(&image(3, 3, 64)).unwrap();
        assert_eq!(code.styles().shape(), [10, 64]);
        assert!((1..10).all(|i| code.row(i) != code.row(0)));
        assert!(e.encode_w(&image(3, 3, 64)).is_err());
    }

    #[test]
    fn zero_init_psp_is_the_mean_image() {
        let mut gen = Generator::<f32>::new(GeneratorConfig::default(), 1).unwrap();
        gen.estimate_mean_latent(64, 1).unwrap();
        let e = Encoder::new(EncoderConfig::for_generator(Variant::Psp, 64, 64, 3), 1).unwrap();
        let mean = gen.mean_image().unwrap();
        for s in 0..3 {
            let (y, code) = psp_forward(&e, &gen, &image(s, 3, 64)).unwrap();
            assert_eq!(y, mean);
            for i in 0..10 {
                assert_eq!(code.row(i), gen.w_avg());
            }
        }
    }

    #[test]
    fn final_code_minus_offset_is_w_avg() {
        let mut gen = Generator::<f64>::new(GeneratorConfig::mini(), 1).unwrap();
        gen.estimate_mean_latent(16, 1).unwrap();
        let e = perturbed(Encoder::new(EncoderConfig::mini(Variant::Psp, 8), 1).unwrap(), 3).cast::<f64>();
        let x = image(1, 3, 16).cast::<f64>();
        let offset = e.encode(&x).unwrap();
        let (_, code) = psp_forward(&e, &gen, &x).unwrap();
        for i in 0..offset.n_styles() {
            for (j, (&c, &o)) in code.row(i).iter().zip(offset.row(i)).enumerate() {
                assert_eq!(c, o + gen.w_avg()[j]);
            }
        }
        assert!(offset.styles().is_finite());
    }

    #[test]
    fn mismatched_generator_rejected() {
        let gen = Generator::<f32>::new(GeneratorConfig::mini(), 1).unwrap();
        let e = Encoder::new(EncoderConfig::for_generator(Variant::Psp, 64, 64, 3), 1).unwrap();
        assert!(psp_forward(&e, &gen, &image(0, 3, 64)).is_err());
    }

    #[test]
    fn named_round_trip_keeps_variant() {
        for v in Variant::ALL {
            let e = perturbed(Encoder::new(EncoderConfig::for_generator(v, 64, 64, 1), 4).unwrap(), 5);
            let nt = NamedTensors::from_bytes(&e.to_named().to_bytes().unwrap()).unwrap();
            assert_eq!(nt.json("meta").unwrap()["variant"], v.name());
            assert_eq!(Encoder::from_named(&nt).unwrap(), e);
        }
    }
}
