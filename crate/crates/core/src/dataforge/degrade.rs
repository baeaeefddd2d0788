//! Conditioning degradations: bicubic down-sampling, pencil-sketch edges and
//! triangular occlusion. All arithmetic is in f64 with a fixed evaluation
//! order, so outputs are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPERRES_FACTORS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Gray level written into occluded pixels.
pub const OCCLUSION_GRAY: f32 = 0.5;

fn chw(image: &Tensor<f32>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", image.shape()))),
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Normalized filter taps `(first source index, weights)` per output sample.
/// The kernel is stretched by the scale factor when shrinking (antialiasing)
/// and the window is clipped to the source and renormalized at the borders.
fn bicubic_taps(input: usize, output: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = input as f64 / output as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..output)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale;
            let lo = ((centre - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((centre + support + 0.5).floor() as usize).min(input);
            let mut w: Vec<f64> = (lo..hi).map(|j| cubic((j as f64 + 0.5 - centre) / stretch)).collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                for v in &mut w {
                    *v /= total;
                }
            }
            (lo, w)
        })
        .collect()
}

fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let cols = bicubic_taps(w, ow);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..][..w];
        for (x, (lo, taps)) in cols.iter().enumerate() {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * row[lo + k]).sum();
        }
    }
    let rows = bicubic_taps(h, oh);
    let mut out = vec![0.0; oh * ow];
    for (y, (lo, taps)) in rows.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * tmp[(lo + k) * ow + x]).sum();
        }
    }
    out
}

/// Separable antialiased bicubic resize of every channel, clamped to `[0, 1]`.
pub fn resize_bicubic(image: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image, "resize_bicubic")?;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("bicubic target size must be positive"));
    }
    if (oh, ow) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let plane: Vec<f64> = image.data()[k * h * w..][..h * w].iter().map(|&v| v as f64).collect();
        out.extend(
            resize_plane(&plane, h, w, oh, ow)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0) as f32),
        );
    }
    Tensor::new(vec![c, oh, ow], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsampled {
    /// `[C, H / factor, W / factor]`.
    pub low: Tensor<f32>,
    /// `low` resized back to `[C, H, W]`.
    pub condition: Tensor<f32>,
}

pub fn downsample_bicubic(image: &Tensor<f32>, factor: usize) -> Result<Downsampled> {
    let (_, h, w) = chw(image, "downsample_bicubic")?;
    if !SUPERRES_FACTORS.contains(&factor) {
        return Err(Error::invalid(format!(
            "down-sampling factor {factor} not in {SUPERRES_FACTORS:?}"
        )));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("factor {factor} does not divide {h}x{w}")));
    }
    let low = resize_bicubic(image, h / factor, w / factor)?;
    let condition = resize_bicubic(&low, h, w)?;
    Ok(Downsampled { low, condition })
}

pub mod sketch {
    pub const BLUR_SIGMA: f64 = 0.8;
    pub const BLUR_RADIUS: usize = 2;
    /// Gradient magnitude a ridge pixel needs to become a stroke.
    pub const EDGE_THRESHOLD: f64 = 0.15;
}

fn clamped(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

// Mirror-paired terms are added before anything else so that a mirrored
// input gives an exactly mirrored result.
fn gaussian_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let r = sketch::BLUR_RADIUS as isize;
    let mut k: Vec<f64> = (0..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sketch::BLUR_SIGMA * sketch::BLUR_SIGMA)).exp())
        .collect();
    let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    for v in &mut k {
        *v /= total;
    }
    let pass = |get: &dyn Fn(isize) -> f64| -> f64 {
        let mut acc = k[0] * get(0);
        for i in 1..=r {
            acc += k[i as usize] * (get(-i) + get(i));
        }
        acc
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = pass(&|i| src[y * w + clamped(x as isize + i, w)]);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = pass(&|i| tmp[clamped(y as isize + i, h) * w + x]);
        }
    }
    out
}

/// Sobel derivatives `(gx, gy)` of one plane.
fn sobel(src: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let at = |y: isize, x: isize| src[clamped(y, h) * w + clamped(x, w)];
    let mut out = vec![(0.0, 0.0); h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = ((at(y + 1, x - 1) + at(y + 1, x + 1)) + 2.0 * at(y + 1, x))
                - ((at(y - 1, x - 1) + at(y - 1, x + 1)) + 2.0 * at(y - 1, x));
            out[y as usize * w + x as usize] = (gx, gy);
        }
    }
    out
}

/// Pencil-sketch edge map: `[1, H, W]`, white background (1) and dark strokes
/// (0). Each pixel takes the gradient of its strongest channel; strokes are
/// the gradient ridges (non-maximum suppression) above the threshold.
pub fn sketchify(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image, "sketchify")?;
    let plane = h * w;
    let d = image.data();
    let mut grad = vec![(0.0f64, 0.0f64); plane];
    let mut mag = vec![0.0f64; plane];
    for k in 0..c {
        let ch: Vec<f64> = d[k * plane..(k + 1) * plane].iter().map(|&v| v as f64).collect();
        for (i, g) in sobel(&gaussian_blur(&ch, h, w), h, w).into_iter().enumerate() {
            let m = (g.0 * g.0 + g.1 * g.1).sqrt();
            if m > mag[i] {
                mag[i] = m;
                grad[i] = g;
            }
        }
    }
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // tan(22.5°)
    const T: f64 = 0.414_213_562_373_095_1;
    let mut out = vec![1.0f32; plane];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m <= sketch::EDGE_THRESHOLD {
                continue;
            }
            let (gx, gy) = grad[i];
            let (ax, ay) = (gx.abs(), gy.abs());
            let (dy, dx) = if ay <= T * ax {
                (0, 1)
            } else if ax <= T * ay {
                (1, 0)
            } else if (gx > 0.0) == (gy > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            if m >= at(y + dy, x + dx) && m >= at(y - dy, x - dx) {
                out[i] = 0.0;
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Half-width of the triangle at the top edge relative to half the image
/// width, chosen so the clipped area equals `coverage` of the image.
fn triangle_spread(coverage: f64) -> f64 {
    if coverage <= 0.25 {
        4.0 * coverage
    } else {
        1.0 / (2.0 - 4.0 * coverage)
    }
}

/// `[1, res, res]` mask of an isosceles triangle with its apex at the image
/// centre and base on the top edge; 1 marks occluded pixels.
pub fn triangular_mask(res: usize, coverage: f64) -> Result<Tensor<f32>> {
    if !(coverage > 0.0 && coverage <= 0.5) {
        return Err(Error::invalid(format!("mask coverage {coverage} outside (0, 0.5]")));
    }
    if res < 2 {
        return Err(Error::invalid(format!("mask resolution {res} below 2")));
    }
    let half = res as f64 / 2.0;
    let spread = triangle_spread(coverage);
    let mut out = vec![0.0f32; res * res];
    for y in 0..res {
        let cy = y as f64 + 0.5;
        if cy > half {
            break;
        }
        let depth = 1.0 - cy / half;
        let reach = if coverage == 0.5 {
            f64::INFINITY
        } else {
            half * spread * depth
        };
        for x in 0..res {
            if (x as f64 + 0.5 - half).abs() <= reach {
                out[y * res + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![1, res, res], out)
}

/// Replaces pixels where `mask` is 1 with mid-gray.
pub fn occlude(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image, "occlude")?;
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(
            "occlude",
            format!("mask {:?} vs image {h}x{w}", mask.shape()),
        ));
    }
    let plane = h * w;
    let mut out = image.clone();
    let data = out.data_mut();
    for k in 0..c {
        for i in 0..plane {
            if mask.data()[i] > 0.5 {
                data[k * plane + i] = OCCLUSION_GRAY;
            }
        }
    }
    Ok(out)
}

/// Record of the degradation applied to produce a condition image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    None,
    Profile,
    Sketch,
    Segmentation,
    Downsample { factor: usize },
    Occlusion { coverage: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::render::render;
    use crate::dataforge::scene::{ranges, SceneParams};
    use crate::rng::rng_fork;

    fn face(seed: u64, res: usize) -> Tensor<f32> {
        let mut rng = rng_fork(seed, 1);
        render(&SceneParams::sample(&mut rng, seed, ranges::YAW), res)
            .unwrap()
            .image
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..10 {
            let t = i as f64 / 10.0;
            let s: f64 = (-2..=2).map(|k| cubic(t + k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn factor_one_is_identity() {
        let img = face(1, 64);
        let d = downsample_bicubic(&img, 1).unwrap();
        assert_eq!(d.low, img);
        assert_eq!(d.condition, img);
    }

    #[test]
    fn factor_eight_on_256_gives_32() {
        let img = Tensor::from_fn(vec![3, 256, 256], |i| ((i % 97) as f32) / 97.0);
        let d = downsample_bicubic(&img, 8).unwrap();
        assert_eq!(d.low.shape(), &[3, 32, 32]);
        assert_eq!(d.condition.shape(), &[3, 256, 256]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(vec![3, 64, 64], 0.37f32);
        for f in SUPERRES_FACTORS {
            let d = downsample_bicubic(&img, f).unwrap();
            for t in [&d.low, &d.condition] {
                assert!(t.data().iter().all(|&v| (v - 0.37).abs() < 1e-6), "factor {f}");
            }
        }
    }

    #[test]
    fn bad_factors_rejected() {
        let img = Tensor::full(vec![3, 48, 48], 0.5f32);
        assert!(downsample_bicubic(&img, 32).is_err());
        assert!(downsample_bicubic(&img, 3).is_err());
    }

    #[test]
    fn sketch_of_constant_is_blank() {
        let s = sketchify(&Tensor::full(vec![3, 32, 32], 0.6f32)).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sketch_stroke_fraction_in_band() {
        let mut lo = f64::MAX;
        let mut hi = 0.0f64;
        for seed in 0..100 {
            let s = sketchify(&face(seed, 64)).unwrap();
            let frac = s.data().iter().filter(|&&v| v == 0.0).count() as f64 / s.len() as f64;
            lo = lo.min(frac);
            hi = hi.max(frac);
        }
        assert!(lo > 0.005 && hi < 0.20, "stroke fraction range [{lo}, {hi}]");
    }

    #[test]
    fn mirrored_input_gives_mirrored_sketch() {
        for seed in 0..20 {
            let img = face(seed, 64);
            let mirrored = sketchify(&img.flip_last()).unwrap();
            assert_eq!(mirrored, sketchify(&img).unwrap().flip_last(), "seed {seed}");
        }
    }

    #[test]
    fn a_dark_ring_keeps_both_sides() {
        let (res, r0, r1) = (32usize, 6.0, 8.0);
        let img = Tensor::from_fn(vec![3, res, res], |i| {
            let p = i % (res * res);
            let (y, x) = ((p / res) as f64 + 0.5 - 16.0, (p % res) as f64 + 0.5 - 16.0);
            let r = (x * x + y * y).sqrt();
            if (r0..r1).contains(&r) {
                0.1
            } else {
                0.9
            }
        });
        let s = sketchify(&img).unwrap();
        let row = &s.data()[16 * res..17 * res];
        assert!(row[..16].contains(&0.0) && row[16..].contains(&0.0), "{row:?}");
        assert_eq!(s, s.flip_last());
    }

    #[test]
    fn triangle_is_mirror_symmetric_with_requested_area() {
        let res = 64;
        for i in 1..=50 {
            let c = i as f64 / 100.0;
            let m = triangular_mask(res, c).unwrap();
            assert_eq!(m.flip_last(), m);
            let frac = m.sum() as f64 / (res * res) as f64;
            assert!((frac - c).abs() <= 1.0 / res as f64, "coverage {c}: {frac}");
        }
        let full = triangular_mask(res, 0.5).unwrap();
        assert_eq!(full.sum() as usize, res * res / 2);
    }

    #[test]
    fn tiny_coverage_is_empty_and_bad_coverage_rejected() {
        assert_eq!(triangular_mask(64, 1e-6).unwrap().sum(), 0.0);
        assert!(triangular_mask(64, 0.0).is_err());
        assert!(triangular_mask(64, 0.51).is_err());
    }

    #[test]
    fn occlusion_only_touches_masked_pixels() {
        let img = face(2, 32);
        let m = triangular_mask(32, 0.3).unwrap();
        let o = occlude(&img, &m).unwrap();
        let plane = 32 * 32;
        for k in 0..3 {
            for i in 0..plane {
                let v = o.data()[k * plane + i];
                if m.data()[i] == 1.0 {
                    assert_eq!(v, OCCLUSION_GRAY);
                } else {
                    assert_eq!(v, img.data()[k * plane + i]);
                }
            }
        }
    }
}
