//! Encoder training loop, evaluation harness and checkpoints.

mod checkpoint;
mod eval;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataforge::dataset::{Sample, Task};
use crate::dataforge::ppm;
use crate::error::{Error, Result};
use crate::latentops::MixPreset;
use crate::losses::{total_loss, LossNets, LossTerms, LossWeights};
use crate::netlib::pose::{pose_dataset, pretrain_pose, PoseReport, PoseTraining};
use crate::netlib::recognition::{pretrain_recognition, RecognitionReport, RecognitionTraining};
use crate::netlib::{train_step, Bound, PerceptualExtractor};
use crate::optim::{Ranger, RangerConfig};
use crate::psp::{psp_forward_graph, Encoder, Variant};
use crate::rng::{rng_fork, streams, StreamRng};
use crate::synthgen::Generator;
use crate::tensor::Tensor;

pub use checkpoint::{
    load_generator, save_generator, AuxNets, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{
    condition_preview, evaluate, preview_grid, reconstruct, runtime_per_image, score_outputs, EvalReport, Scores,
    MIN_RUNTIME_IMAGES,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
const PREVIEW_ROWS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: Task,
    pub variant: Variant,
    pub weights: LossWeights,
    /// Dataset directory holding the manifest.
    pub data: Option<PathBuf>,
    pub mix: MixPreset,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate and checkpoint every this many steps; 0 means only at the
    /// start and the end.
    pub eval_every: usize,
    /// Frontalization: flip the target alone with probability `flip_prob`.
    pub target_flip: bool,
    pub flip_prob: f64,
    pub runtime_images: usize,
    pub optimizer: RangerConfig,
}

impl TaskConfig {
    /// Defaults for `task` with its loss preset.
    pub fn new(task: Task) -> Self {
        TaskConfig {
            task,
            variant: Variant::Psp,
            weights: LossWeights::preset(task),
            data: None,
            mix: MixPreset::FineMix,
            batch: 8,
            steps: 2000,
            seed: 0,
            eval_every: 500,
            target_flip: task == Task::Frontalization,
            flip_prob: 0.5,
            runtime_images: MIN_RUNTIME_IMAGES,
            optimizer: RangerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!(
                "flip_prob {} is outside [0, 1]",
                self.flip_prob
            )));
        }
        if self.runtime_images < MIN_RUNTIME_IMAGES {
            return Err(Error::invalid(format!(
                "runtime_images must be at least {MIN_RUNTIME_IMAGES}, got {}",
                self.runtime_images
            )));
        }
        Ok(())
    }

    fn eval_due(&self, step: usize) -> bool {
        step == self.steps || (self.eval_every > 0 && step.is_multiple_of(self.eval_every))
    }
}

/// One augmented training batch.
pub struct Batch {
    pub condition: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Draws training batches: epoch shuffles, paired horizontal flips and, for
/// frontalization, target-only flips.
pub struct Sampler<'a> {
    data: &'a [Sample],
    batch: usize,
    target_flip: Option<f64>,
    order: Vec<usize>,
    order_rng: StreamRng,
    aug_rng: StreamRng,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a [Sample], config: &TaskConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        Ok(Sampler {
            data,
            batch: config.batch,
            target_flip: (config.task == Task::Frontalization && config.target_flip).then_some(config.flip_prob),
            order: Vec::new(),
            order_rng: rng_fork(config.seed, streams::TRAIN_ORDER),
            aug_rng: rng_fork(config.seed, streams::AUGMENT),
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut cond = Vec::with_capacity(self.batch);
        let mut target = Vec::with_capacity(self.batch);
        let mut mask = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            if self.order.is_empty() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.order_rng);
            }
            let s = &self.data[self.order.pop().expect("refilled")];
            let (mut c, mut t, mut m) = (s.condition.clone(), s.target.clone(), s.mask.clone());
            if self.aug_rng.random_bool(0.5) {
                c = c.flip_last();
                t = t.flip_last();
                m = m.flip_last();
            }
            if let Some(p) = self.target_flip {
                if self.aug_rng.random_bool(p) {
                    t = t.flip_last();
                    m = m.flip_last();
                }
            }
            cond.push(c);
            target.push(t);
            mask.push(m);
        }
        Ok(Batch {
            condition: Tensor::stack(&cond)?,
            target: Tensor::stack(&target)?,
            mask: Tensor::stack(&mask)?,
        })
    }
}

/// Builds the training objective for one batch on an already bound encoder.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    g: &mut Graph<f32>,
    e: &Encoder<f32>,
    ep: &Bound,
    gen: &Generator<f32>,
    gp: &Bound,
    aux: &AuxNets,
    weights: &LossWeights,
    batch: &Batch,
) -> Result<LossTerms> {
    let x = g.constant(&batch.condition);
    let y = g.constant(&batch.target);
    let out = psp_forward_graph(g, e, ep, gen, gp, x)?;
    let mask: Option<Var> = weights.regions.map(|_| g.constant(&batch.mask));
    let nets = LossNets {
        perceptual: &aux.perceptual,
        recognition: (weights.id > 0.0).then_some(&aux.recognition),
    };
    total_loss(g, &nets, y, out.image, Some(out.offset), weights, mask)
}

pub struct TrainOutcome {
    pub encoder: Encoder<f32>,
    pub optimizer: Ranger<f32>,
    /// Loss of every completed step.
    pub losses: Vec<f64>,
    /// Held-out reports at step 0, each cadence and the end.
    pub reports: Vec<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains `encoder` against the frozen `gen` and auxiliary nets. With `out`
/// set, reports are appended to the metrics log and each evaluation writes a
/// checkpoint and a preview grid there.
pub fn train(
    config: &TaskConfig,
    mut encoder: Encoder<f32>,
    gen: &Generator<f32>,
    aux: &AuxNets,
    train_split: &[Sample],
    val_split: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if encoder.variant() != config.variant {
        return Err(Error::invalid(format!(
            "config asks for a {} encoder, got {}",
            config.variant,
            encoder.variant()
        )));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut sampler = Sampler::new(train_split, config)?;
    let mut opt = Ranger::new(encoder.params_mut().tensors(), config.optimizer)?;
    let mut outcome = TrainOutcome {
        encoder: encoder.clone(),
        optimizer: opt.clone(),
        losses: Vec::with_capacity(config.steps),
        reports: Vec::new(),
        checkpoints: Vec::new(),
    };
    let record = |step: usize, e: &Encoder<f32>, opt: &Ranger<f32>, outcome: &mut TrainOutcome| -> Result<()> {
        let report = evaluate(e, gen, val_split, aux, config.task, step, config.runtime_images)?;
        if let Some(dir) = out {
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(METRICS_FILE))?;
            serde_json::to_writer(&mut log, &report)?;
            log.write_all(b"\n")?;
            ppm::save(
                dir.join(format!("preview_{step:06}.ppm")),
                &preview_grid(e, gen, val_split, PREVIEW_ROWS)?,
            )?;
            let path = dir.join(format!("checkpoint_{step:06}.ntf"));
            Checkpoint::new(config.clone(), step, e.clone(), gen.clone(), Some(opt.clone())).save(&path)?;
            outcome.checkpoints.push(path);
        }
        outcome.reports.push(report);
        Ok(())
    };

    record(0, &encoder, &opt, &mut outcome)?;
    for step in 1..=config.steps {
        let batch = sampler.next_batch()?;
        let mut params = std::mem::take(encoder.params_mut());
        let result = train_step(&mut params, &mut opt, |g, ep| {
            let gp = gen.bind(g);
            Ok(training_loss(g, &encoder, ep, gen, &gp, aux, &config.weights, &batch)?.total)
        });
        *encoder.params_mut() = params;
        let loss = match result {
            Ok(v) => v as f64,
            Err(Error::NonFinite(msg)) => {
                return Err(Error::NonFinite(format!("step {step}: {msg}; training aborted")));
            }
            Err(e) => return Err(e),
        };
        outcome.losses.push(loss);
        if config.eval_due(step) {
            record(step, &encoder, &opt, &mut outcome)?;
        }
    }
    outcome.encoder = encoder;
    outcome.optimizer = opt;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxReports {
    pub recognition: RecognitionReport,
    pub pose: PoseReport,
}

/// Fixed perceptual features plus trained recognition and pose networks.
pub fn pretrain_aux(
    recognition: &RecognitionTraining,
    pose: &PoseTraining,
    seed: u64,
) -> Result<(AuxNets, AuxReports)> {
    let (r, r_report) = pretrain_recognition(recognition, seed)?;
    let data = pose_dataset(pose.samples, pose.resolution, seed)?;
    let (p, p_report) = pretrain_pose(&data, pose, seed)?;
    Ok((
        AuxNets {
            perceptual: PerceptualExtractor::new(seed),
            recognition: r,
            pose: p,
        },
        AuxReports {
            recognition: r_report,
            pose: p_report,
        },
    ))
}

/// Encoder matching `gen` and the condition channels of `config.task`.
pub fn encoder_for(config: &TaskConfig, gen: &Generator<f32>) -> Result<Encoder<f32>> {
    let ec = crate::psp::EncoderConfig::for_generator(
        config.variant,
        gen.resolution(),
        gen.latent_dim(),
        config.task.condition_channels(),
    );
    Encoder::new(ec, config.seed)
}
