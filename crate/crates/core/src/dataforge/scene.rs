//! Scene parameters for the procedural face renderer and their mapping to
//! generator input vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_fork, sample_stream};

pub const MAX_YAW: f64 = 0.6;

const IDENTITY_FAMILY: u64 = 0x1d;

/// Documented ranges of the continuous scene parameters.
pub mod ranges {
    pub const HEAD_WIDTH: (f64, f64) = (0.40, 0.56);
    pub const HEAD_HEIGHT: (f64, f64) = (0.52, 0.68);
    pub const EYE_SPACING: (f64, f64) = (0.13, 0.24);
    pub const EYE_SIZE: (f64, f64) = (0.045, 0.085);
    pub const NOSE_LENGTH: (f64, f64) = (0.08, 0.20);
    pub const MOUTH_WIDTH: (f64, f64) = (0.12, 0.30);
    pub const BROW_TILT: (f64, f64) = (-0.35, 0.35);
    pub const YAW: (f64, f64) = (-super::MAX_YAW, super::MAX_YAW);
    pub const UNIT: (f64, f64) = (0.0, 1.0);
}

/// Geometry that defines who a face is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceShape {
    pub head_width: f64,
    pub head_height: f64,
    pub eye_spacing: f64,
    pub eye_size: f64,
    pub nose_length: f64,
    pub mouth_width: f64,
    pub brow_tilt: f64,
}

impl FaceShape {
    /// Deterministic shape for an identity id.
    pub fn for_identity(id: u64) -> Self {
        let mut rng = rng_fork(id, sample_stream(IDENTITY_FAMILY, 0));
        let mut draw = |r: (f64, f64)| rng.random_range(r.0..r.1);
        FaceShape {
            head_width: draw(ranges::HEAD_WIDTH),
            head_height: draw(ranges::HEAD_HEIGHT),
            eye_spacing: draw(ranges::EYE_SPACING),
            eye_size: draw(ranges::EYE_SIZE),
            nose_length: draw(ranges::NOSE_LENGTH),
            mouth_width: draw(ranges::MOUTH_WIDTH),
            brow_tilt: draw(ranges::BROW_TILT),
        }
    }

    fn fields(&self) -> [(f64, (f64, f64)); 7] {
        [
            (self.head_width, ranges::HEAD_WIDTH),
            (self.head_height, ranges::HEAD_HEIGHT),
            (self.eye_spacing, ranges::EYE_SPACING),
            (self.eye_size, ranges::EYE_SIZE),
            (self.nose_length, ranges::NOSE_LENGTH),
            (self.mouth_width, ranges::MOUTH_WIDTH),
            (self.brow_tilt, ranges::BROW_TILT),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub identity: u64,
    pub shape: FaceShape,
    /// Head rotation about the vertical axis, radians.
    pub yaw: f64,
    pub hair_color: [f64; 3],
    /// 0 = lightest, 1 = darkest.
    pub skin_tone: f64,
    pub glasses: bool,
    pub smile: f64,
    pub background: [f64; 3],
}

/// Number of leading latent coordinates that carry scene parameters.
pub const SCENE_CODE_DIM: usize = 17;

const GLASSES_RATE: f64 = 0.25;

impl SceneParams {
    /// Uniformly random appearance for `identity`, with yaw drawn from `yaw_range`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, identity: u64, yaw_range: (f64, f64)) -> Self {
        let mut unit = || rng.random_range(0.0..1.0);
        let hair_color = [unit(), unit(), unit()];
        let skin_tone = unit();
        let glasses = unit() < GLASSES_RATE;
        let smile = unit();
        let background = [unit(), unit(), unit()];
        let yaw = yaw_range.0 + (yaw_range.1 - yaw_range.0) * unit();
        SceneParams {
            identity,
            shape: FaceShape::for_identity(identity),
            yaw,
            hair_color,
            skin_tone,
            glasses,
            smile,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut checks: Vec<(&str, f64, (f64, f64))> =
            self.shape.fields().iter().map(|&(v, r)| ("shape", v, r)).collect();
        checks.push(("yaw", self.yaw, ranges::YAW));
        checks.push(("skin_tone", self.skin_tone, ranges::UNIT));
        checks.push(("smile", self.smile, ranges::UNIT));
        for c in self.hair_color.iter().chain(&self.background) {
            checks.push(("color", *c, ranges::UNIT));
        }
        for (name, v, (lo, hi)) in checks {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(Error::invalid(format!(
                    "scene parameter {name}={v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Mirror image of the scene: same person and appearance, opposite yaw.
    pub fn mirrored(&self) -> Self {
        SceneParams {
            yaw: -self.yaw,
            ..*self
        }
    }

    /// Normal-scores of the parameters: a uniformly random scene maps to a
    /// standard normal vector of length [`SCENE_CODE_DIM`].
    pub fn latent_code(&self) -> [f64; SCENE_CODE_DIM] {
        let normal = Normal::standard();
        let score = |v: f64, (lo, hi): (f64, f64)| {
            let u = ((v - lo) / (hi - lo)).clamp(1e-4, 1.0 - 1e-4);
            normal.inverse_cdf(u)
        };
        let s = self.shape;
        let glasses_u: f64 = if self.glasses {
            1.0 - GLASSES_RATE / 2.0
        } else {
            (1.0 - GLASSES_RATE) / 2.0
        };
        [
            score(s.head_width, ranges::HEAD_WIDTH),
            score(s.head_height, ranges::HEAD_HEIGHT),
            score(s.eye_spacing, ranges::EYE_SPACING),
            score(s.eye_size, ranges::EYE_SIZE),
            score(s.nose_length, ranges::NOSE_LENGTH),
            score(s.mouth_width, ranges::MOUTH_WIDTH),
            score(s.brow_tilt, ranges::BROW_TILT),
            score(self.yaw, ranges::YAW),
            score(self.hair_color[0], ranges::UNIT),
            score(self.hair_color[1], ranges::UNIT),
            score(self.hair_color[2], ranges::UNIT),
            score(self.skin_tone, ranges::UNIT),
            normal.inverse_cdf(glasses_u),
            score(self.smile, ranges::UNIT),
            score(self.background[0], ranges::UNIT),
            score(self.background[1], ranges::UNIT),
            score(self.background[2], ranges::UNIT),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_determines_shape() {
        assert_eq!(FaceShape::for_identity(17), FaceShape::for_identity(17));
        assert_ne!(FaceShape::for_identity(17), FaceShape::for_identity(18));
    }

    #[test]
    fn sampled_scenes_are_valid() {
        let mut rng = rng_fork(3, 3);
        for id in 0..200 {
            SceneParams::sample(&mut rng, id, ranges::YAW).validate().unwrap();
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let mut rng = rng_fork(3, 3);
        let mut p = SceneParams::sample(&mut rng, 1, ranges::YAW);
        p.yaw = 0.9;
        assert!(p.validate().is_err());
        p.yaw = 0.0;
        p.smile = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn latent_code_is_roughly_standard_normal() {
        let mut rng = rng_fork(9, 9);
        let n = 4000;
        let mut sum = [0.0; SCENE_CODE_DIM];
        let mut sq = [0.0; SCENE_CODE_DIM];
        for i in 0..n {
            let z = SceneParams::sample(&mut rng, i, ranges::YAW).latent_code();
            for k in 0..SCENE_CODE_DIM {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..SCENE_CODE_DIM {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.15, "coord {k} mean {mean}");
            assert!(var > 0.3 && var < 1.6, "coord {k} var {var}");
        }
    }
}
