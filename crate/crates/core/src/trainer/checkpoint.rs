//! Training checkpoints and the auxiliary-network bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netlib::{PerceptualExtractor, PoseRegressor, RecognitionNet};
use crate::ntf::NamedTensors;
use crate::optim::Ranger;
use crate::psp::Encoder;
use crate::synthgen::Generator;

use super::TaskConfig;

pub const CHECKPOINT_MAGIC: &str = "psp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub magic: String,
    pub version: u32,
    pub step: usize,
    pub config: TaskConfig,
}

/// Encoder, frozen generator and optimizer state at a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub encoder: Encoder<f32>,
    pub generator: Generator<f32>,
    pub optimizer: Option<Ranger<f32>>,
}

impl Checkpoint {
    pub fn new(
        config: TaskConfig,
        step: usize,
        encoder: Encoder<f32>,
        generator: Generator<f32>,
        optimizer: Option<Ranger<f32>>,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                magic: CHECKPOINT_MAGIC.into(),
                version: CHECKPOINT_VERSION,
                step,
                config,
            },
            encoder,
            generator,
            optimizer,
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        nt.insert_json("meta", &serde_json::to_value(&self.meta).expect("checkpoint meta"));
        nt.extend_prefixed("E/", &self.encoder.to_named());
        nt.extend_prefixed("G/", &self.generator.to_named());
        if let Some(opt) = &self.optimizer {
            nt.extend_prefixed("OPT/", &opt.to_named());
        }
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let raw = nt.json("meta")?;
        let magic = raw.get("magic").and_then(|m| m.as_str()).unwrap_or("");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "not a training checkpoint: meta magic is {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::format(format!(
                "unsupported checkpoint version {}, this build reads version {CHECKPOINT_VERSION}",
                version.map_or("<missing>".to_string(), |v| v.to_string())
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(raw)?;
        let opt = nt.with_prefix("OPT/");
        Ok(Checkpoint {
            meta,
            encoder: Encoder::from_named(&nt.with_prefix("E/"))?,
            generator: Generator::from_named(&nt.with_prefix("G/"))?,
            optimizer: if opt.is_empty() {
                None
            } else {
                Some(Ranger::from_named(&opt)?)
            },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_atomic(&self.to_named(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&NamedTensors::load(path)?)
    }
}

pub(crate) fn save_atomic(nt: &NamedTensors, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ntf.tmp");
    nt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Frozen networks used by the losses and the evaluation harness.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxNets {
    pub perceptual: PerceptualExtractor<f32>,
    pub recognition: RecognitionNet<f32>,
    pub pose: PoseRegressor<f32>,
}

impl AuxNets {
    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        nt.extend_prefixed("F/", &self.perceptual.to_named());
        nt.extend_prefixed("R/", &self.recognition.to_named());
        nt.extend_prefixed("P/", &self.pose.to_named());
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        Ok(AuxNets {
            perceptual: PerceptualExtractor::from_named(&nt.with_prefix("F/"))?,
            recognition: RecognitionNet::from_named(&nt.with_prefix("R/"))?,
            pose: PoseRegressor::from_named(&nt.with_prefix("P/"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_atomic(&self.to_named(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&NamedTensors::load(path)?)
    }

    /// Checksums of F, R and P, in that order.
    pub fn checksums(&self) -> [u64; 3] {
        [
            self.perceptual.params().checksum(),
            self.recognition.params().checksum(),
            self.pose.params().checksum(),
        ]
    }
}

/// Saves a generator under the `G/` prefix.
pub fn save_generator(g: &Generator<f32>, path: &Path) -> Result<()> {
    let mut nt = NamedTensors::new();
    nt.extend_prefixed("G/", &g.to_named());
    save_atomic(&nt, path)
}

/// Loads the `G/` generator of a generator file or of a training checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    Generator::from_named(&NamedTensors::load(path)?.with_prefix("G/"))
}
