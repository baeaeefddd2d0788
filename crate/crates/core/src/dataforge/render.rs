//! Supersampled 2.5-D face rasterizer.
//!
//! Facial features sit on an ellipsoidal head and are projected after a yaw
//! rotation, so mirroring a render is the same as negating its yaw. Sample
//! positions are symmetric about the vertical midline, which makes a yaw-0
//! render mirror-symmetric up to summation order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::scene::SceneParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Part {
    Background = 0,
    Face = 1,
    Hair = 2,
    Eyes = 3,
    Nose = 4,
    Mouth = 5,
}

pub const NUM_PARTS: usize = 6;

/// Display colors for segmentation maps, indexed by [`Part`].
pub const PALETTE: [[f32; 3]; NUM_PARTS] = [
    [0.0, 0.0, 0.0],
    [0.9, 0.7, 0.5],
    [0.4, 0.2, 0.1],
    [0.2, 0.4, 1.0],
    [0.9, 0.9, 0.2],
    [0.9, 0.1, 0.2],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    /// `[3, res, res]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[res, res]` part labels.
    pub segmentation: Tensor<u8>,
    /// `[1, res, res]` head-ellipse coverage: 1 inside the face, 0 outside.
    pub face_mask: Tensor<f32>,
}

const SUBSAMPLES: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
const HEAD_CENTER_Y: f64 = 0.1;

struct Geometry {
    p: SceneParams,
    a: f64,
    b: f64,
    skin: [f64; 3],
    eye_y: f64,
    mouth_y: f64,
    eyes: Vec<(f64, f64, f64)>,
    nose_x: f64,
    mouth_x: f64,
    sin_yaw: f64,
    cos_yaw: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale3(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

impl Geometry {
    fn new(p: &SceneParams) -> Self {
        let s = p.shape;
        let (a, b) = (s.head_width, s.head_height);
        let eye_y = HEAD_CENTER_Y - 0.12 * b;
        let project = |lateral: f64| {
            let phi = (lateral / a).clamp(-0.95, 0.95).asin();
            (a * (phi + p.yaw).sin(), (phi + p.yaw).cos())
        };
        let eyes = [-1.0, 1.0]
            .iter()
            .map(|&side| {
                let (x, fore) = project(side * s.eye_spacing);
                (side, x, fore)
            })
            .filter(|&(_, _, fore)| fore > 0.2)
            .collect();
        Geometry {
            p: *p,
            a,
            b,
            skin: lerp3([0.96, 0.82, 0.70], [0.42, 0.28, 0.20], p.skin_tone),
            eye_y,
            mouth_y: eye_y + s.nose_length + 0.11,
            eyes,
            nose_x: 1.12 * a * p.yaw.sin(),
            mouth_x: a * p.yaw.sin(),
            sin_yaw: p.yaw.sin(),
            cos_yaw: p.yaw.cos(),
        }
    }

    fn head_radius2(&self, u: f64, v: f64) -> f64 {
        let dy = v - HEAD_CENTER_Y;
        (u / self.a).powi(2) + (dy / self.b).powi(2)
    }

    /// Color and part label of the front-most surface at `(u, v)`.
    fn shade(&self, u: f64, v: f64) -> ([f64; 3], Part) {
        let p = &self.p;
        let s = p.shape;
        let hair = p.hair_color;

        let r2 = self.head_radius2(u, v);
        let in_head = r2 <= 1.0;

        if !in_head {
            let hx = u + 0.10 * self.a * self.sin_yaw;
            let hy = v - (HEAD_CENTER_Y - 0.06);
            let in_back_hair = (hx / (1.12 * self.a)).powi(2) + (hy / (1.02 * self.b)).powi(2) <= 1.0
                && v < HEAD_CENTER_Y + 0.35 * self.b;
            if in_back_hair {
                return (scale3(hair, 0.85), Part::Hair);
            }
            let neck_x = u - 0.3 * self.a * self.sin_yaw;
            if neck_x.abs() < 0.42 * self.a && v > HEAD_CENTER_Y + 0.5 * self.b {
                return (scale3(self.skin, 0.78), Part::Face);
            }
            let grad = 0.85 + 0.15 * (1.0 - (v + 1.0) / 2.0);
            return (scale3(p.background, grad), Part::Background);
        }

        let hairline = HEAD_CENTER_Y - 0.55 * self.b + 0.12 * (u / self.a).powi(2);
        if v < hairline {
            return (hair, Part::Hair);
        }

        // glasses frames sit in front of everything on the face
        if p.glasses {
            let mut on_frame = false;
            for &(_, ex, fore) in &self.eyes {
                let rx = 1.7 * s.eye_size * fore;
                let ry = 1.4 * s.eye_size;
                let e = ((u - ex) / rx).powi(2) + ((v - self.eye_y) / ry).powi(2);
                if (e.sqrt() - 1.0).abs() < 0.03 / ry.min(rx) {
                    on_frame = true;
                }
            }
            if self.eyes.len() == 2 {
                let (l, r) = (
                    self.eyes[0].1 + 1.7 * s.eye_size * self.eyes[0].2,
                    self.eyes[1].1 - 1.7 * s.eye_size * self.eyes[1].2,
                );
                if u > l && u < r && (v - self.eye_y).abs() < 0.025 {
                    on_frame = true;
                }
            }
            if on_frame {
                return ([0.08, 0.08, 0.10], Part::Eyes);
            }
        }

        for &(side, ex, fore) in &self.eyes {
            let rx = s.eye_size * fore;
            let ry = 0.6 * s.eye_size;
            let (du, dv) = (u - ex, v - self.eye_y);
            if (du / rx).powi(2) + (dv / ry).powi(2) <= 1.0 {
                let pupil = 0.5 * s.eye_size;
                if (du / (pupil * fore)).powi(2) + (dv / pupil).powi(2) <= 1.0 {
                    return ([0.10, 0.08, 0.08], Part::Eyes);
                }
                return ([0.95, 0.95, 0.93], Part::Eyes);
            }
            // brow: a tilted bar above the eye; tilt mirrors with the side
            let by = self.eye_y - 1.7 * s.eye_size;
            let half_len = 1.2 * s.eye_size * fore;
            let t = (u - ex) / half_len;
            let tilt = side * s.brow_tilt;
            if t.abs() <= 1.0 && (v - (by - tilt * t * 0.03)).abs() < 0.016 {
                return (scale3(hair, 0.6), Part::Hair);
            }
        }

        let nose_rx = 0.035 + 0.03 * self.sin_yaw.abs();
        let nose_ry = s.nose_length / 2.0;
        let nose_cy = self.eye_y + nose_ry + 0.02;
        if ((u - self.nose_x) / nose_rx).powi(2) + ((v - nose_cy) / nose_ry).powi(2) <= 1.0 {
            return (scale3(self.skin, 0.78), Part::Nose);
        }

        let half_w = s.mouth_width / 2.0 * self.cos_yaw.max(0.3);
        let t = (u - self.mouth_x) / half_w;
        if t.abs() < 1.0 {
            let bend = 1.0 - t * t;
            let centre = self.mouth_y + p.smile * 0.05 * bend;
            let thick = (0.022 + 0.012 * p.smile) * bend.sqrt();
            if (v - centre).abs() < thick {
                return (lerp3(self.skin, [0.62, 0.12, 0.18], 0.85), Part::Mouth);
            }
        }

        let shading = 0.82 + 0.18 * (1.0 - r2).sqrt();
        (scale3(self.skin, shading), Part::Face)
    }
}

/// Renders `params` at `res x res`.
pub fn render(params: &SceneParams, res: usize) -> Result<Render> {
    params.validate()?;
    if res < 4 {
        return Err(Error::invalid(format!("render resolution {res} below 4")));
    }
    let geo = Geometry::new(params);
    let plane = res * res;
    let mut image = vec![0.0f32; 3 * plane];
    let mut seg = vec![0u8; plane];
    let mut mask = vec![0.0f32; plane];
    let n = (SUBSAMPLES.len() * SUBSAMPLES.len()) as f64;
    let rf = res as f64;
    // pixel centre at 2*px + 1 - res, so mirrored pixels get bitwise-negated u
    let coord = |p: usize, o: f64| ((2 * p + 1) as f64 - rf + 2.0 * o) / rf;
    for py in 0..res {
        for px in 0..res {
            let mut acc = [0.0f64; 3];
            let mut cover = 0.0;
            for &oy in &SUBSAMPLES {
                for &ox in &SUBSAMPLES {
                    let (u, v) = (coord(px, ox), coord(py, oy));
                    let (c, _) = geo.shade(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                    if geo.head_radius2(u, v) <= 1.0 {
                        cover += 1.0;
                    }
                }
            }
            let i = py * res + px;
            for k in 0..3 {
                image[k * plane + i] = (acc[k] / n).clamp(0.0, 1.0) as f32;
            }
            mask[i] = (cover / n) as f32;
            seg[i] = geo.shade(coord(px, 0.0), coord(py, 0.0)).1 as u8;
        }
    }
    Ok(Render {
        image: Tensor::new(vec![3, res, res], image)?,
        segmentation: Tensor::new(vec![res, res], seg)?,
        face_mask: Tensor::new(vec![1, res, res], mask)?,
    })
}

/// One-hot `[NUM_PARTS, res, res]` encoding of a label map.
pub fn one_hot(seg: &Tensor<u8>) -> Tensor<f32> {
    let plane = seg.len();
    let mut out = vec![0.0f32; NUM_PARTS * plane];
    for (i, &l) in seg.data().iter().enumerate() {
        out[l as usize * plane + i] = 1.0;
    }
    let mut shape = vec![NUM_PARTS];
    shape.extend_from_slice(seg.shape());
    Tensor::new(shape, out).expect("one-hot shape")
}

/// Palette rendering of a label map, `[3, res, res]`.
pub fn colorize(seg: &Tensor<u8>) -> Tensor<f32> {
    let plane = seg.len();
    let mut out = vec![0.0f32; 3 * plane];
    for (i, &l) in seg.data().iter().enumerate() {
        for k in 0..3 {
            out[k * plane + i] = PALETTE[l as usize][k];
        }
    }
    let mut shape = vec![3];
    shape.extend_from_slice(seg.shape());
    Tensor::new(shape, out).expect("palette shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::scene::ranges;
    use crate::rng::rng_fork;

    fn scene(seed: u64, yaw: f64) -> SceneParams {
        let mut rng = rng_fork(seed, 0);
        let mut p = SceneParams::sample(&mut rng, seed, ranges::YAW);
        p.yaw = yaw;
        p
    }

    #[test]
    fn deterministic() {
        let p = scene(4, 0.3);
        assert_eq!(render(&p, 32).unwrap(), render(&p, 32).unwrap());
    }

    #[test]
    fn frontal_render_is_mirror_symmetric() {
        for seed in 0..8 {
            let r = render(&scene(seed, 0.0), 64).unwrap();
            let diff = r
                .image
                .zip_map(&r.image.flip_last(), |a, b| (a - b).abs())
                .unwrap()
                .max_abs();
            assert!(diff < 1e-5, "seed {seed}: {diff}");
            assert_eq!(r.segmentation.flip_last(), r.segmentation);
        }
    }

    #[test]
    fn flip_equals_negated_yaw() {
        for seed in 0..8 {
            let p = scene(seed, 0.45);
            let a = render(&p, 64).unwrap().image.flip_last();
            let b = render(&p.mirrored(), 64).unwrap().image;
            assert!(a.zip_map(&b, |x, y| (x - y).abs()).unwrap().max_abs() < 1e-5);
        }
    }

    #[test]
    fn labels_cover_every_pixel_from_palette() {
        let r = render(&scene(2, -0.2), 64).unwrap();
        assert!(r.segmentation.data().iter().all(|&l| (l as usize) < NUM_PARTS));
        let present: std::collections::HashSet<u8> = r.segmentation.data().iter().copied().collect();
        for part in [
            Part::Background,
            Part::Face,
            Part::Hair,
            Part::Eyes,
            Part::Nose,
            Part::Mouth,
        ] {
            assert!(present.contains(&(part as u8)), "{part:?} missing");
        }
    }

    #[test]
    fn rejects_invalid_params() {
        let mut p = scene(1, 0.0);
        p.skin_tone = 1.5;
        assert!(render(&p, 64).is_err());
    }

    #[test]
    fn one_hot_sums_to_one() {
        let r = render(&scene(3, 0.1), 32).unwrap();
        let oh = one_hot(&r.segmentation);
        let plane = 32 * 32;
        for i in 0..plane {
            let s: f32 = (0..NUM_PARTS).map(|c| oh.data()[c * plane + i]).sum();
            assert_eq!(s, 1.0);
        }
    }
}
