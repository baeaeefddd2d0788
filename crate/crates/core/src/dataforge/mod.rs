//! Procedural paired-data generation.

pub mod dataset;
pub mod degrade;
pub mod ppm;
pub mod render;
pub mod scene;
