//! Golden degradation fixtures shared by the golden test and the acceptance
//! suite.

#![allow(dead_code)]

use std::path::PathBuf;

use psp_core::dataforge::degrade::{downsample_bicubic, sketchify, triangular_mask, SUPERRES_FACTORS};
use psp_core::dataforge::render::render;
use psp_core::dataforge::scene::{ranges, SceneParams};
use psp_core::ntf::{NamedTensors, Stored};
use psp_core::rng::rng_fork;
use psp_core::Tensor;

pub const FIXTURE_RES: usize = 256;
pub const MASK_RES: usize = 64;
pub const MASK_COVERAGES: [f64; 4] = [0.1, 0.25, 0.4, 0.5];
/// Set to rewrite the golden files from the current implementation.
pub const BLESS_ENV: &str = "PSP_BLESS";

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/degradations.ntf")
}

/// Seeded 8-bit render used as the degradation input.
pub fn fixture_input() -> Tensor<u8> {
    let mut rng = rng_fork(2024, 0xf1);
    let scene = SceneParams::sample(&mut rng, 77, ranges::YAW);
    let img = render(&scene, FIXTURE_RES).expect("render").image;
    img.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn as_float(img: &Tensor<u8>) -> Tensor<f32> {
    img.map(|&v| v as f32 / 255.0)
}

pub fn mask_key(coverage: f64) -> String {
    format!("mask_c{:03}", (coverage * 100.0).round() as u32)
}

/// Every degradation output of the current implementation, keyed as in the
/// golden file.
pub fn compute_fixtures(input: &Tensor<u8>) -> NamedTensors {
    let x = as_float(input);
    let mut nt = NamedTensors::new();
    nt.insert("input", Stored::U8(input.clone()));
    nt.insert_float("sketch", &sketchify(&x).expect("sketch"));
    // ×1 is checked as the identity on the input instead of stored
    for f in SUPERRES_FACTORS.into_iter().filter(|&f| f > 1) {
        nt.insert_float(
            format!("down_x{f}"),
            &downsample_bicubic(&x, f).expect("downsample").low,
        );
    }
    for c in MASK_COVERAGES {
        nt.insert_float(mask_key(c), &triangular_mask(MASK_RES, c).expect("mask"));
    }
    nt
}

/// Names whose payload or shape differ from the golden file, plus missing
/// and unexpected entries.
pub fn mismatches(golden: &NamedTensors, actual: &NamedTensors) -> Vec<String> {
    let mut out: Vec<String> = actual
        .iter()
        .filter(|(name, t)| golden.get(name) != Some(*t))
        .map(|(name, _)| name.to_string())
        .collect();
    out.extend(
        golden
            .iter()
            .filter(|(n, _)| actual.get(n).is_none())
            .map(|(n, _)| format!("{n} (missing)")),
    );
    out
}

pub fn bless_requested() -> bool {
    std::env::var_os(BLESS_ENV).is_some_and(|v| v != "0")
}
