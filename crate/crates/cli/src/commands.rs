use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use psp_core::dataforge::dataset::{load_split, make_dataset, read_manifest, Split};
use psp_core::dataforge::{degrade, ppm};
use psp_core::gradcheck::{check_all_primitives, check_composition, COMPOSITION_TOLERANCE, PRIMITIVE_TOLERANCE};
use psp_core::latentops::{code_to_named, interpolate, multimodal};
use psp_core::netlib::PerceptualExtractor;
use psp_core::ntf::NamedTensors;
use psp_core::psp::{psp_forward, Encoder};
use psp_core::synthgen::{generator_pairs, pretrain_generator, Noise};
use psp_core::tensor::Tensor;
use psp_core::trainer::{evaluate, load_generator, pretrain_aux, save_generator, train, AuxNets, Checkpoint};

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, DegradeOp, SplitArg};

type Res = Result<(), CliError>;

pub fn run(cli: Cli) -> Res {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::GenData(a) => {
            if let Some(t) = a.task {
                cfg.data.task = t;
            }
            if let Some(n) = a.n {
                cfg.data.n = n;
            }
            if let Some(r) = a.resolution {
                cfg.data.resolution = r;
            }
            cfg.data.dir = Some(a.out.clone());
            cfg.log("gen-data");
            let d = &cfg.data;
            let entries = make_dataset(d.task, d.n, d.split, seed, d.resolution, &a.out)?;
            write_config(&cfg, &a.out)?;
            println!("wrote {} {} samples to {}", entries.len(), d.task, a.out.display());
            Ok(())
        }
        Command::PretrainGen(a) => {
            if let Some(s) = a.steps {
                cfg.generator.training.steps = s;
            }
            cfg.log("pretrain-gen");
            let gc = cfg.generator.config();
            gc.validate()?;
            let t = &cfg.generator.training;
            let pairs = generator_pairs(t.pairs, gc.resolution, gc.latent_dim, seed)?;
            let (gen, report) = pretrain_generator(gc, &pairs, t, &PerceptualExtractor::new(seed), seed)?;
            save_generator(&gen, &a.out)?;
            print_json(&report)
        }
        Command::PretrainAux(a) => {
            cfg.log("pretrain-aux");
            let (aux, reports) = pretrain_aux(&cfg.train.recognition, &cfg.train.pose, seed)?;
            aux.save(&a.out)?;
            print_json(&reports)
        }
        Command::Train(a) => {
            if let Some(t) = a.task {
                cfg.data.task = t;
            }
            if let Some(d) = a.data {
                cfg.data.dir = Some(d);
            }
            if let Some(v) = a.variant {
                cfg.encoder.variant = v;
            }
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(b) = a.batch {
                cfg.train.batch = b;
            }
            if let Some(e) = a.eval_every {
                cfg.train.eval_every = e;
            }
            cfg.log("train");
            let dir = cfg
                .data
                .dir
                .clone()
                .ok_or_else(|| CliError::validation("train needs a dataset: pass --data or set [data] dir"))?;
            check_task(&dir, cfg.data.task)?;
            let gen = load_generator(&a.generator)?;
            let aux = AuxNets::load(&a.aux)?;
            let task_cfg = cfg.task_config();
            let ec = cfg
                .encoder
                .config(gen.resolution(), gen.latent_dim(), task_cfg.task.condition_channels());
            let encoder = Encoder::new(ec, seed)?;
            let train_split = load_split(&dir, Split::Train)?;
            let val_split = load_split(&dir, Split::Val)?;
            fs::create_dir_all(&a.out)?;
            write_config(&cfg, &a.out)?;
            let out = train(&task_cfg, encoder, &gen, &aux, &train_split, &val_split, Some(&a.out))?;
            print_json(out.reports.last().expect("final report"))
        }
        Command::Eval(a) => {
            cfg.log("eval");
            let ck = Checkpoint::load(&a.ckpt)?;
            let aux = AuxNets::load(&a.aux)?;
            let task = ck.meta.config.task;
            check_task(&a.split, task)?;
            let split = match a.which {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let samples = load_split(&a.split, split)?;
            let report = evaluate(
                &ck.encoder,
                &ck.generator,
                &samples,
                &aux,
                task,
                ck.meta.step,
                cfg.eval.runtime_images,
            )?;
            if let Some(m) = &a.metrics {
                let mut log = OpenOptions::new().create(true).append(true).open(m)?;
                writeln!(log, "{}", serde_json::to_string(&report).expect("report"))?;
            }
            print_json(&report)
        }
        Command::Invert(a) => {
            cfg.log("invert");
            let ck = Checkpoint::load(&a.ckpt)?;
            let x = load_condition(&a.image)?;
            let (image, code) = psp_forward(&ck.encoder, &ck.generator, &x)?;
            ppm::save(&a.out, &image)?;
            if let Some(p) = &a.code {
                code_to_named(&code).save(p)?;
            }
            Ok(())
        }
        Command::Synth(a) => {
            if let Some(n) = a.multimodal {
                cfg.mix.samples = n;
            }
            if let Some(p) = a.mix_preset {
                cfg.mix.preset = p;
            }
            if a.alpha.is_some() {
                cfg.mix.alpha = a.alpha;
            }
            cfg.log("synth");
            let ck = Checkpoint::load(&a.ckpt)?;
            let x = load_condition(&a.image)?;
            let mut spec = cfg.mix.preset.spec(ck.generator.resolution())?;
            if let Some(alpha) = cfg.mix.alpha {
                spec.alpha = alpha;
            }
            spec.validate(ck.generator.n_styles())?;
            if spec.layers.is_empty() {
                return Err(CliError::validation(format!(
                    "{} selects no style rows at resolution {}",
                    cfg.mix.preset.name(),
                    ck.generator.resolution()
                )));
            }
            fs::create_dir_all(&a.out)?;
            let (recon, _) = psp_forward(&ck.encoder, &ck.generator, &x)?;
            ppm::save(a.out.join("reconstruction.ppm"), &recon)?;
            for (k, (code, image)) in multimodal(&ck.encoder, &ck.generator, &x, cfg.mix.samples, seed, &spec)?
                .into_iter()
                .enumerate()
            {
                ppm::save(a.out.join(format!("sample_{k:03}.ppm")), &image)?;
                code_to_named(&code).save(a.out.join(format!("sample_{k:03}.ntf")))?;
            }
            write_config(&cfg, &a.out)
        }
        Command::Interp(a) => {
            cfg.log("interp");
            if a.steps < 2 {
                return Err(CliError::validation(format!(
                    "--steps must be at least 2, got {}",
                    a.steps
                )));
            }
            let ck = Checkpoint::load(&a.ckpt)?;
            let (_, ca) = psp_forward(&ck.encoder, &ck.generator, &load_condition(&a.a)?)?;
            let (_, cb) = psp_forward(&ck.encoder, &ck.generator, &load_condition(&a.b)?)?;
            fs::create_dir_all(&a.out)?;
            for k in 0..a.steps {
                // α weighs the first code: frame 0 is `a`, the last is `b`
                let alpha = 1.0 - k as f64 / (a.steps - 1) as f64;
                let code = interpolate(&ca, &cb, alpha)?;
                let image = ck.generator.synthesize(&code, Noise::Zero)?;
                ppm::save(a.out.join(format!("frame_{k:03}.ppm")), &image)?;
            }
            Ok(())
        }
        Command::Degrade(a) => {
            cfg.log("degrade");
            let image = ppm::load(&a.input)?;
            let out = match a.op {
                DegradeOp::Sketch => degrade::sketchify(&image)?,
                DegradeOp::Downsample => {
                    let d = degrade::downsample_bicubic(&image, a.factor)?;
                    if a.restore {
                        d.condition
                    } else {
                        d.low
                    }
                }
                DegradeOp::Mask => {
                    let s = image.shape();
                    if s[1] != s[2] {
                        return Err(CliError::validation(format!("mask needs a square image, got {s:?}")));
                    }
                    let m = degrade::triangular_mask(s[1], a.coverage)?;
                    if let Some(p) = &a.mask_out {
                        let mut nt = NamedTensors::new();
                        nt.insert_float("mask", &m);
                        nt.save(p)?;
                    }
                    degrade::occlude(&image, &m)?
                }
            };
            ppm::save(&a.out, &out)?;
            Ok(())
        }
        Command::Gradcheck(a) => {
            cfg.log("gradcheck");
            let mut failed = Vec::new();
            println!("{:<24} {:>12} {:>7}  status", "check", "max_rel_err", "points");
            let mut row = |name: &str, err: f64, points: usize, tol: f64| {
                let ok = err < tol;
                println!(
                    "{name:<24} {err:>12.3e} {points:>7}  {}",
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(name.to_string());
                }
            };
            for r in check_all_primitives(a.points, seed)? {
                row(&r.name, r.max_rel_err, r.points, PRIMITIVE_TOLERANCE);
            }
            if !a.primitives_only {
                let r = check_composition(seed)?;
                row(&r.name, r.max_rel_err, r.points, COMPOSITION_TOLERANCE);
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::numeric(format!(
                    "gradient checks failed: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Res {
    println!(
        "{}",
        serde_json::to_string(value).map_err(|e| CliError::validation(e.to_string()))?
    );
    Ok(())
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Res {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// PPM/PGM images, or NTF1 files holding a `condition` tensor.
fn load_condition(path: &Path) -> Result<Tensor<f32>, CliError> {
    if path.extension().is_some_and(|e| e == "ntf") {
        Ok(NamedTensors::load(path)?.float("condition")?)
    } else {
        Ok(ppm::load(path)?)
    }
}

fn check_task(dir: &Path, task: psp_core::dataforge::dataset::Task) -> Res {
    let entries = read_manifest(dir)?;
    if let Some(e) = entries.iter().find(|e| e.task != task) {
        return Err(CliError::validation(format!(
            "dataset {} holds {} samples, expected {task}",
            dir.display(),
            e.task
        )));
    }
    Ok(())
}
