//! Declarative run configuration: TOML sections merged with command-line
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use psp_core::dataforge::dataset::{SplitRatios, Task};
use psp_core::latentops::MixPreset;
use psp_core::losses::LossWeights;
use psp_core::netlib::pose::PoseTraining;
use psp_core::netlib::recognition::RecognitionTraining;
use psp_core::optim::RangerConfig;
use psp_core::psp::{EncoderConfig, Variant};
use psp_core::synthgen::{GeneratorConfig, GeneratorTraining};
use psp_core::trainer::{TaskConfig, MIN_RUNTIME_IMAGES};

use crate::CliError;

pub const SEED_ENV: &str = "PSP_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; `--seed` wins over this, and `PSP_SEED` fills in when
    /// neither is given.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub generator: GeneratorSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub mix: MixSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: Task,
    pub n: usize,
    pub resolution: usize,
    pub dir: Option<PathBuf>,
    pub split: SplitRatios,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            task: Task::Inversion,
            n: 512,
            resolution: 64,
            dir: None,
            split: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_depth: usize,
    pub channels: Vec<usize>,
    pub training: GeneratorTraining,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let c = GeneratorConfig::default();
        GeneratorSection {
            resolution: c.resolution,
            latent_dim: c.latent_dim,
            mapping_depth: c.mapping_depth,
            channels: c.channels,
            training: GeneratorTraining::default(),
        }
    }
}

impl GeneratorSection {
    pub fn config(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            mapping_depth: self.mapping_depth,
            channels: self.channels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub variant: Variant,
    pub widths: Option<[usize; 4]>,
    pub pyramid_channels: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            variant: Variant::Psp,
            widths: None,
            pyramid_channels: None,
        }
    }
}

impl EncoderSection {
    pub fn config(&self, resolution: usize, latent_dim: usize, in_channels: usize) -> EncoderConfig {
        let mut c = EncoderConfig::for_generator(self.variant, resolution, latent_dim, in_channels);
        if let Some(w) = self.widths {
            c.widths = w;
        }
        if let Some(p) = self.pyramid_channels {
            c.pyramid_channels = p;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    /// Defaults to on for frontalization.
    pub target_flip: Option<bool>,
    pub flip_prob: f64,
    /// Replaces the task's loss preset.
    pub weights: Option<LossWeights>,
    pub optimizer: RangerConfig,
    pub recognition: RecognitionTraining,
    pub pose: PoseTraining,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TaskConfig::new(Task::Inversion);
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            eval_every: t.eval_every,
            target_flip: None,
            flip_prob: t.flip_prob,
            weights: None,
            optimizer: t.optimizer,
            recognition: RecognitionTraining::default(),
            pose: PoseTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub runtime_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            runtime_images: MIN_RUNTIME_IMAGES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    pub preset: MixPreset,
    /// Overrides the preset's α.
    pub alpha: Option<f64>,
    pub samples: usize,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            preset: MixPreset::FineMix,
            alpha: None,
            samples: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::validation(format!("config {}: {}", path.display(), e.msg)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(e.message().to_string()))
    }

    /// Flag, then config file, then `PSP_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn task_config(&self) -> TaskConfig {
        let task = self.data.task;
        let base = TaskConfig::new(task);
        TaskConfig {
            task,
            variant: self.encoder.variant,
            weights: self.train.weights.unwrap_or(base.weights),
            data: self.data.dir.clone(),
            mix: self.mix.preset,
            batch: self.train.batch,
            steps: self.train.steps,
            seed: self.seed.unwrap_or(0),
            eval_every: self.train.eval_every,
            target_flip: self.train.target_flip.unwrap_or(base.target_flip),
            flip_prob: self.train.flip_prob,
            runtime_images: self.eval.runtime_images,
            optimizer: self.train.optimizer,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Prints the resolved configuration to stderr.
    pub fn log(&self, command: &str) {
        eprintln!("# {command}: resolved config\n{}", self.to_toml());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[train]\nstep = 3",
            "[data]\ntask = \"inversion\"\nsize = 1",
            "[extra]\n",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.code, crate::EXIT_VALIDATION, "{text}");
        }
    }

    #[test]
    fn sections_reach_the_task_config() {
        let c = RunConfig::parse(
            "seed = 9\n[data]\ntask = \"frontalization\"\n[train]\nsteps = 7\nbatch = 4\n[train.optimizer]\nlr = 0.01\n[encoder]\nvariant = \"w\"",
        )
        .unwrap();
        let t = c.task_config();
        assert_eq!(
            (t.task, t.steps, t.batch, t.seed, t.variant),
            (Task::Frontalization, 7, 4, 9, Variant::W)
        );
        assert_eq!(t.optimizer.lr, 0.01);
        assert_eq!(t.weights, LossWeights::FRONTALIZATION);
        assert!(t.target_flip);
    }

    #[test]
    fn documented_example_parses() {
        let c = RunConfig::parse(
            r#"
seed = 1
[data]
task = "inversion"
n = 512
resolution = 64
[generator]
resolution = 64
latent_dim = 64
mapping_depth = 4
channels = [64, 64, 32, 16, 8]
[generator.training]
steps = 3000
[encoder]
variant = "psp"
[train]
steps = 2000
batch = 8
eval_every = 500
weights = { l2 = 1.0, lpips = 0.8, id = 0.1, reg = 0.0 }
[train.optimizer]
lr = 0.001
[eval]
runtime_images = 50
[mix]
preset = "fine_mix"
alpha = 1.0
samples = 5
"#,
        )
        .unwrap();
        assert_eq!(c.generator.config(), GeneratorConfig::default());
        assert_eq!(c.task_config().weights.regions, None);
        assert_eq!(c.mix.alpha, Some(1.0));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.resolve_seed(Some(4)).unwrap();
        c.train.weights = Some(LossWeights::FRONTALIZATION);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
