//! Style mixing, multi-modal resampling and latent interpolation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntf::NamedTensors;
use crate::psp::{psp_forward, Encoder, Level, StylePartition};
use crate::rng::{normal_tensor, rng_fork, sample_stream, streams};
use crate::synthgen::{Generator, LatentCode, Noise, Space};
use crate::tensor::{Scalar, Tensor};

/// Rows `layers` of a code are blended toward another code by `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub layers: Range<usize>,
    pub alpha: f64,
}

impl MixSpec {
    pub fn validate(&self, n_styles: usize) -> Result<()> {
        if self.layers.start > self.layers.end || self.layers.end > n_styles {
            return Err(Error::invalid(format!(
                "mix layers {:?} outside 0..{n_styles}",
                self.layers
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixPreset {
    /// Resample the fine rows outright.
    FineMix,
    /// Blend the medium rows half way.
    MediumMix,
}

impl MixPreset {
    pub fn name(self) -> &'static str {
        match self {
            MixPreset::FineMix => "fine_mix",
            MixPreset::MediumMix => "medium_mix",
        }
    }

    pub fn spec(self, resolution: usize) -> Result<MixSpec> {
        let p = StylePartition::for_resolution(resolution)?;
        Ok(match self {
            MixPreset::FineMix => MixSpec {
                layers: p.indices(Level::Fine),
                alpha: 1.0,
            },
            MixPreset::MediumMix => MixSpec {
                layers: p.indices(Level::Medium),
                alpha: 0.5,
            },
        })
    }
}

impl std::str::FromStr for MixPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [MixPreset::FineMix, MixPreset::MediumMix]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mix preset `{s}`")))
    }
}

pub fn replicate<T: Scalar>(w: &[T], n_styles: usize) -> Result<LatentCode<T>> {
    LatentCode::replicate(w, n_styles)
}

fn check_same<T: Scalar>(op: &'static str, a: &LatentCode<T>, b: &LatentCode<T>) -> Result<()> {
    if a.styles().shape() != b.styles().shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.styles().shape(), b.styles().shape()),
        ));
    }
    Ok(())
}

/// Rows in `spec.layers` become `(1 - alpha) base + alpha other`.
pub fn style_mix<T: Scalar>(base: &LatentCode<T>, other: &LatentCode<T>, spec: &MixSpec) -> Result<LatentCode<T>> {
    check_same("style_mix", base, other)?;
    spec.validate(base.n_styles())?;
    let d = base.dim();
    let a = T::of(spec.alpha);
    let mut styles = base.styles().clone();
    for i in spec.layers.clone() {
        let dst = &mut styles.data_mut()[i * d..(i + 1) * d];
        for (v, &o) in dst.iter_mut().zip(other.row(i)) {
            // b + a (o - b) leaves equal rows untouched; a = 1 copies exactly
            *v = if spec.alpha == 1.0 { o } else { *v + a * (o - *v) };
        }
    }
    let space = if base.space() == Space::WReplicated && (spec.layers.is_empty() || spec.alpha == 0.0) {
        Space::WReplicated
    } else {
        Space::WPlus
    };
    match LatentCode::from_parts(styles.clone(), space) {
        Ok(c) => Ok(c),
        Err(_) => LatentCode::w_plus(styles),
    }
}

/// `alpha w1 + (1 - alpha) w2` elementwise.
pub fn interpolate<T: Scalar>(w1: &LatentCode<T>, w2: &LatentCode<T>, alpha: f64) -> Result<LatentCode<T>> {
    check_same("interpolate", w1, w2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    let styles = w1.styles().zip_map(w2.styles(), |x, y| a * x + b * y)?;
    if w1.space() == Space::WReplicated && w2.space() == Space::WReplicated {
        LatentCode::from_parts(styles, Space::WReplicated)
    } else {
        LatentCode::w_plus(styles)
    }
}

/// Final code of `x` with the rows of `spec` resampled from `n` random
/// replicated styles, and the synthesized images.
pub fn multimodal<T: Scalar>(
    e: &Encoder<T>,
    g: &Generator<T>,
    x: &Tensor<T>,
    n: usize,
    seed: u64,
    spec: &MixSpec,
) -> Result<Vec<(LatentCode<T>, Tensor<T>)>> {
    let (_, code) = psp_forward(e, g, x)?;
    let codes = (0..n as u64)
        .map(|k| {
            let mut rng = rng_fork(seed, sample_stream(streams::MULTIMODAL, k));
            let z = normal_tensor::<T, _>(&mut rng, vec![1, g.latent_dim()], 1.0);
            let w = g.map(&z)?;
            style_mix(&code, &replicate(w.data(), g.n_styles())?, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    let images = g.synthesize_batch(&codes, Noise::Zero)?;
    Ok(codes
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, images.select(i)))
        .collect())
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Copies `content` (`[C, height, width]`) into `condition` at `region`.
pub fn splice<T: Scalar>(condition: &Tensor<T>, region: Region, content: &Tensor<T>) -> Result<Tensor<T>> {
    let s = condition.shape();
    if s.len() != 3 {
        return Err(Error::shape("splice", format!("condition {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if region.top + region.height > h || region.left + region.width > w {
        return Err(Error::invalid(format!("edit region {region:?} exceeds {h}x{w}")));
    }
    if content.shape() != [c, region.height, region.width] {
        return Err(Error::shape(
            "splice",
            format!("content {:?} for region {region:?} with {c} channels", content.shape()),
        ));
    }
    let mut out = condition.clone();
    for ch in 0..c {
        for y in 0..region.height {
            let src = (ch * region.height + y) * region.width;
            let dst = (ch * h + region.top + y) * w + region.left;
            out.data_mut()[dst..dst + region.width].copy_from_slice(&content.data()[src..src + region.width]);
        }
    }
    Ok(out)
}

/// Splices an edit into a condition image, re-encodes and synthesizes.
/// Returns the edited condition and the output image.
pub fn conditional_local_edit<T: Scalar>(
    e: &Encoder<T>,
    g: &Generator<T>,
    condition: &Tensor<T>,
    region: Region,
    content: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let edited = splice(condition, region, content)?;
    let (image, _) = psp_forward(e, g, &edited)?;
    Ok((edited, image))
}

pub fn code_to_named<T: Scalar>(code: &LatentCode<T>) -> NamedTensors {
    let mut nt = NamedTensors::new();
    nt.insert_float("code", code.styles());
    nt.insert_json("space", &serde_json::to_value(code.space()).expect("space"));
    nt
}

pub fn code_from_named<T: Scalar>(nt: &NamedTensors) -> Result<LatentCode<T>> {
    let space: Space = serde_json::from_value(nt.json("space")?)?;
    LatentCode::from_parts(nt.float("code")?, space)
}
