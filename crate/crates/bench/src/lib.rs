//! Fixtures shared by the benchmarks: untrained networks at the default
//! 64×64 configuration and a batch of inversion samples.

use psp_core::dataforge::dataset::{generate_sample, Sample, Task};
use psp_core::netlib::{PerceptualExtractor, PoseRegressor, RecognitionNet};
use psp_core::psp::{Encoder, EncoderConfig, Variant};
use psp_core::synthgen::{Generator, GeneratorConfig};
use psp_core::trainer::AuxNets;

pub const SEED: u64 = 1;

pub fn generator() -> Generator<f32> {
    Generator::new(GeneratorConfig::default(), SEED).expect("default generator")
}

pub fn encoder(gen: &Generator<f32>, variant: Variant) -> Encoder<f32> {
    let c = EncoderConfig::for_generator(variant, gen.resolution(), gen.latent_dim(), 3);
    Encoder::new(c, SEED).expect("default encoder")
}

pub fn aux() -> AuxNets {
    AuxNets {
        perceptual: PerceptualExtractor::new(SEED),
        recognition: RecognitionNet::new(48, SEED),
        pose: PoseRegressor::new(SEED),
    }
}

pub fn samples(n: usize) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| generate_sample(Task::Inversion, SEED, i, GeneratorConfig::default().resolution).expect("sample"))
        .collect()
}
