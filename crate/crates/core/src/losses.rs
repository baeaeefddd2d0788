//! Reconstruction, perceptual, identity and latent-regularization losses and
//! their weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataforge::dataset::Task;
use crate::error::{Error, Result};
use crate::netlib::{PerceptualExtractor, RecognitionNet};
use crate::tensor::{Scalar, Tensor};

/// `(l2, lpips)` weights for the inner face region and its complement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionWeights {
    pub inner_l2: f64,
    pub inner_lpips: f64,
    pub outer_l2: f64,
    pub outer_lpips: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
    pub reg: f64,
    /// When set, replaces `l2` and `lpips` by region-weighted terms.
    #[serde(default)]
    pub regions: Option<RegionWeights>,
}

impl LossWeights {
    pub const INVERSION: LossWeights = LossWeights {
        l2: 1.0,
        lpips: 0.8,
        id: 0.1,
        reg: 0.0,
        regions: None,
    };

    pub const FRONTALIZATION: LossWeights = LossWeights {
        l2: 0.01,
        lpips: 0.8,
        id: 1.0,
        reg: 0.005,
        regions: Some(RegionWeights {
            inner_l2: 0.01,
            inner_lpips: 0.8,
            outer_l2: 0.001,
            outer_lpips: 0.08,
        }),
    };

    pub const CONDITIONAL: LossWeights = LossWeights {
        l2: 1.0,
        lpips: 0.8,
        id: 0.0,
        reg: 0.005,
        regions: None,
    };

    pub fn preset(task: Task) -> LossWeights {
        match task {
            Task::Inversion => Self::INVERSION,
            Task::Frontalization => Self::FRONTALIZATION,
            _ => Self::CONDITIONAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.l2, self.lpips, self.id, self.reg];
        if let Some(r) = self.regions {
            all.extend([r.inner_l2, r.inner_lpips, r.outer_l2, r.outer_lpips]);
        }
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Frozen networks the losses evaluate through.
pub struct LossNets<'a, T> {
    pub perceptual: &'a PerceptualExtractor<T>,
    pub recognition: Option<&'a RecognitionNet<T>>,
}

/// Graph nodes of every weighted term; absent terms had zero weight.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l2: Option<Var>,
    pub lpips: Option<Var>,
    pub id: Option<Var>,
    pub reg: Option<Var>,
}

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn check_mask<T: Scalar>(g: &Graph<T>, x: Var, mask: Var) -> Result<()> {
    let (s, m) = (g.shape(x), g.shape(mask));
    if m.len() != 4 || m[0] != s[0] || m[1] != 1 || m[2..] != s[2..] {
        return Err(Error::shape("mask", format!("mask {m:?} for images {s:?}")));
    }
    Ok(())
}

/// Mean squared error, or its per-pixel weighted mean under `mask`
/// (`[N, 1, H, W]`). An all-zero mask gives 0.
pub fn l2_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, mask: Option<Var>) -> Result<Var> {
    same_shape(g, "l2_loss", x, y)?;
    let d = g.sub(y, x)?;
    let sq = g.square(d);
    let Some(m) = mask else {
        return Ok(g.mean(sq));
    };
    check_mask(g, x, m)?;
    let channels = g.shape(x)[1] as f64;
    let weight = g.value(m).sum().as_f64() * channels;
    let weighted = g.mul(sq, m)?;
    let total = g.sum(weighted);
    if weight == 0.0 {
        return Ok(g.mul_scalar(total, 0.0));
    }
    Ok(g.mul_scalar(total, 1.0 / weight))
}

/// `m x + (1 - m) mu`, with `mu` the per-image, per-channel mean of both images.
fn blend_toward_joint_mean<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, m: Var) -> Result<(Var, Var)> {
    let mx = g.channel_mean(x)?;
    let my = g.channel_mean(y)?;
    let sum = g.add(mx, my)?;
    let mu = g.mul_scalar(sum, 0.5);
    let blend = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let diff = g.sub(v, mu)?;
        let kept = g.mul(diff, m)?;
        g.add(kept, mu)
    };
    Ok((blend(g, x)?, blend(g, y)?))
}

/// Perceptual distance; under `mask` the outer pixels of both images are
/// first blended toward their joint mean.
pub fn lpips_loss<T: Scalar>(
    g: &mut Graph<T>,
    f: &PerceptualExtractor<T>,
    x: Var,
    y: Var,
    mask: Option<Var>,
) -> Result<Var> {
    same_shape(g, "lpips_loss", x, y)?;
    let (a, b) = match mask {
        Some(m) => {
            check_mask(g, x, m)?;
            blend_toward_joint_mean(g, x, y, m)?
        }
        None => (x, y),
    };
    let p = f.bind(g);
    f.distance_graph(g, &p, a, b)
}

/// `1 - cos(R(x), R(y))`, averaged over the batch.
pub fn id_loss<T: Scalar>(g: &mut Graph<T>, r: &RecognitionNet<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "id_loss", x, y)?;
    let p = r.bind(g);
    let ex = r.embed(g, &p, x)?;
    let ey = r.embed(g, &p, y)?;
    let prod = g.mul(ex, ey)?;
    let cos = g.sum_axis(prod, 1)?;
    let mean = g.mean(cos);
    let neg = g.mul_scalar(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean over rows of the Euclidean norm of the offset `E(x)`.
pub fn reg_loss<T: Scalar>(g: &mut Graph<T>, offset: Var) -> Result<Var> {
    let n = g.norm(offset)?;
    Ok(g.mean(n))
}

fn scaled_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.mul_scalar(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc)
}

/// `λ1 L2 + λ2 LPIPS + λ3 ID + λ4 reg` between target `x` and output `y`.
/// With region weights, L2 and LPIPS are evaluated on the inner mask and on
/// its complement.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    nets: &LossNets<'_, T>,
    x: Var,
    y: Var,
    offset: Option<Var>,
    w: &LossWeights,
    mask: Option<Var>,
) -> Result<LossTerms> {
    w.validate()?;
    let (l2, lpips) = match w.regions {
        None => {
            let l2 = if w.l2 > 0.0 {
                Some(l2_loss(g, x, y, mask)?)
            } else {
                None
            };
            let lp = if w.lpips > 0.0 {
                Some(lpips_loss(g, nets.perceptual, x, y, mask)?)
            } else {
                None
            };
            (l2.map(|v| (w.l2, v)), lp.map(|v| (w.lpips, v)))
        }
        Some(r) => {
            let inner = mask.ok_or_else(|| Error::invalid("region weights need an inner-face mask"))?;
            check_mask(g, x, inner)?;
            let neg = g.mul_scalar(inner, -1.0);
            let outer = g.add_scalar(neg, 1.0);
            let li = l2_loss(g, x, y, Some(inner))?;
            let lo = l2_loss(g, x, y, Some(outer))?;
            let l2 = scaled_sum(g, &[(r.inner_l2, li), (r.outer_l2, lo)])?;
            let pi = lpips_loss(g, nets.perceptual, x, y, Some(inner))?;
            let po = lpips_loss(g, nets.perceptual, x, y, Some(outer))?;
            let lp = scaled_sum(g, &[(r.inner_lpips, pi), (r.outer_lpips, po)])?;
            (l2.map(|v| (1.0, v)), lp.map(|v| (1.0, v)))
        }
    };
    let id = if w.id > 0.0 {
        let r = nets
            .recognition
            .ok_or_else(|| Error::invalid("identity weight set without a recognition network"))?;
        Some(id_loss(g, r, x, y)?)
    } else {
        None
    };
    let reg = match (w.reg > 0.0, offset) {
        (true, Some(o)) => Some(reg_loss(g, o)?),
        (true, None) => return Err(Error::invalid("regularization weight set without an offset")),
        _ => None,
    };
    let mut terms: Vec<(f64, Var)> = [l2, lpips].into_iter().flatten().collect();
    terms.extend(id.map(|v| (w.id, v)));
    terms.extend(reg.map(|v| (w.reg, v)));
    let total = match scaled_sum(g, &terms)? {
        Some(t) => t,
        None => {
            let z = g.constant(&Tensor::scalar(T::zero()));
            g.mul_scalar(z, 1.0)
        }
    };
    Ok(LossTerms {
        total,
        l2: l2.map(|t| t.1),
        lpips: lpips.map(|t| t.1),
        id,
        reg,
    })
}
