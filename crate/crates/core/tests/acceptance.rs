//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test -p psp-core --test acceptance -- ac4 ac5` runs a subset.
//! Pretrained networks are cached under the cargo target tmpdir, keyed by
//! their full configuration; set `PSP_ACCEPTANCE_FRESH=1` to rebuild them.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use psp_core::dataforge::dataset::{generate_sample, Sample, Task};
use psp_core::dataforge::degrade::downsample_bicubic;
use psp_core::gradcheck::{check_all_primitives, check_composition, COMPOSITION_TOLERANCE, PRIMITIVE_TOLERANCE};
use psp_core::latentops::{interpolate, multimodal, style_mix, MixPreset, MixSpec};
use psp_core::losses::LossWeights;
use psp_core::netlib::pose::PoseTraining;
use psp_core::netlib::recognition::RecognitionTraining;
use psp_core::netlib::PerceptualExtractor;
use psp_core::ntf::NamedTensors;
use psp_core::psp::{psp_forward, psp_forward_batch, Encoder, EncoderConfig, Variant};
use psp_core::rng::{normal_tensor, rng_fork};
use psp_core::synthgen::{
    generator_pairs, num_styles, pretrain_generator, truncate, Generator, GeneratorConfig, GeneratorTraining,
    LatentCode,
};
use psp_core::trainer::{encoder_for, evaluate, pretrain_aux, train, AuxNets, Checkpoint, EvalReport, TaskConfig};
use psp_core::Tensor;

const GEN_SEED: u64 = 1;
const AUX_SEED: u64 = 1;
const TRAIN_N: usize = 512;
const VAL_N: usize = 64;
const SMOKE_STEPS: usize = 2000;
const SMOKE_BUDGET_SECONDS: f64 = 30.0 * 60.0;
/// Inversion ablations (AC5 to AC7) train as long as the smoke run, which
/// the AC5 pSp seed-1 run reuses.
const ABLATION_STEPS: usize = SMOKE_STEPS;
/// Frontalization and sketch runs (AC8, AC9).
const TASK_STEPS: usize = 1000;
const SEEDS: [u64; 3] = [1, 2, 3];
const DETERMINISM_STEPS: usize = 50;
const GRADCHECK_POINTS: usize = 10;
const GRADCHECK_BUDGET_SECONDS: f64 = 120.0;

type Verdict = Result<String, String>;

fn data_seed(task: Task) -> u64 {
    match task {
        Task::Inversion => 7,
        Task::Frontalization => 8,
        Task::Sketch => 9,
        _ => 10,
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct RunKey {
    task: Task,
    variant: Variant,
    id: bool,
    reg: bool,
    seed: u64,
    steps: usize,
}

impl RunKey {
    fn new(task: Task, variant: Variant, seed: u64, steps: usize) -> Self {
        let w = LossWeights::preset(task);
        RunKey {
            task,
            variant,
            id: w.id > 0.0,
            reg: w.reg > 0.0,
            seed,
            steps,
        }
    }

    fn weights(&self) -> LossWeights {
        let mut w = LossWeights::preset(self.task);
        match (self.id, w.id > 0.0) {
            (false, _) => w.id = 0.0,
            (true, false) => w.id = 0.1,
            _ => {}
        }
        match (self.reg, w.reg > 0.0) {
            (false, _) => w.reg = 0.0,
            (true, false) => w.reg = 0.005,
            _ => {}
        }
        w
    }

    fn label(&self) -> String {
        format!(
            "{} {} id={} reg={} seed={}",
            self.task,
            self.variant,
            self.weights().id,
            self.weights().reg,
            self.seed
        )
    }
}

struct Run {
    reports: Vec<EvalReport>,
    end: EvalReport,
    losses: Vec<f64>,
    encoder: Encoder<f32>,
    seconds: f64,
}

struct Context {
    cache: PathBuf,
    gen: Option<Generator<f32>>,
    aux: Option<AuxNets>,
    data: HashMap<Task, (Vec<Sample>, Vec<Sample>)>,
    runs: HashMap<RunKey, Run>,
}

impl Context {
    fn new() -> Self {
        let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&cache).expect("cache dir");
        Context {
            cache,
            gen: None,
            aux: None,
            data: HashMap::new(),
            runs: HashMap::new(),
        }
    }

    fn fresh() -> bool {
        std::env::var_os("PSP_ACCEPTANCE_FRESH").is_some_and(|v| v != "0")
    }

    fn cached(&self, file: &str, key: &serde_json::Value) -> Option<NamedTensors> {
        if Self::fresh() {
            return None;
        }
        let nt = NamedTensors::load(self.cache.join(file)).ok()?;
        (nt.json("cache_key").ok()? == *key).then_some(nt)
    }

    fn store(&self, file: &str, key: &serde_json::Value, mut nt: NamedTensors) {
        nt.insert_json("cache_key", key);
        nt.save(self.cache.join(file)).expect("cache write");
    }

    fn generator(&mut self) -> &Generator<f32> {
        if self.gen.is_none() {
            let config = GeneratorConfig::default();
            let training = GeneratorTraining::default();
            let key = serde_json::json!({"config": config, "training": training, "seed": GEN_SEED});
            let gen = match self.cached("generator.ntf", &key) {
                Some(nt) => Generator::from_named(&nt.with_prefix("G/")).expect("cached generator"),
                None => {
                    let t = Instant::now();
                    let pairs =
                        generator_pairs(training.pairs, config.resolution, config.latent_dim, GEN_SEED).unwrap();
                    let f = PerceptualExtractor::new(GEN_SEED);
                    let (gen, report) = pretrain_generator(config, &pairs, &training, &f, GEN_SEED).unwrap();
                    println!(
                        "   info: generator pretrained in {:.0} s, held-out L2 {:.4} -> {:.4}",
                        t.elapsed().as_secs_f64(),
                        report.heldout_l2_untrained,
                        report.heldout_l2_trained
                    );
                    let mut nt = NamedTensors::new();
                    nt.extend_prefixed("G/", &gen.to_named());
                    self.store("generator.ntf", &key, nt);
                    gen
                }
            };
            self.gen = Some(gen);
        }
        self.gen.as_ref().expect("generator")
    }

    fn aux(&mut self) -> &AuxNets {
        if self.aux.is_none() {
            let (r, p) = (RecognitionTraining::default(), PoseTraining::default());
            let key = serde_json::json!({"recognition": r, "pose": p, "seed": AUX_SEED});
            let aux = match self.cached("aux.ntf", &key) {
                Some(nt) => AuxNets::from_named(&nt).expect("cached aux nets"),
                None => {
                    let t = Instant::now();
                    let (aux, reports) = pretrain_aux(&r, &p, AUX_SEED).unwrap();
                    println!(
                        "   info: aux nets pretrained in {:.0} s, recognition accuracy {:.3} (chance {:.3}), pose MAE {:.3} (baseline {:.3})",
                        t.elapsed().as_secs_f64(),
                        reports.recognition.heldout_accuracy,
                        reports.recognition.chance,
                        reports.pose.heldout_mae,
                        reports.pose.baseline_mae
                    );
                    self.store("aux.ntf", &key, aux.to_named());
                    aux
                }
            };
            self.aux = Some(aux);
        }
        self.aux.as_ref().expect("aux")
    }

    fn data(&mut self, task: Task) -> &(Vec<Sample>, Vec<Sample>) {
        self.data.entry(task).or_insert_with(|| {
            let res = GeneratorConfig::default().resolution;
            let all: Vec<Sample> = (0..(TRAIN_N + VAL_N) as u64)
                .map(|i| generate_sample(task, data_seed(task), i, res).unwrap())
                .collect();
            let val = all[TRAIN_N..].to_vec();
            let mut train = all;
            train.truncate(TRAIN_N);
            (train, val)
        })
    }

    fn task_config(key: &RunKey) -> TaskConfig {
        TaskConfig {
            variant: key.variant,
            weights: key.weights(),
            steps: key.steps,
            seed: key.seed,
            eval_every: 0,
            ..TaskConfig::new(key.task)
        }
    }

    /// Training run, memoized across criteria.
    fn run(&mut self, key: RunKey) -> &Run {
        if !self.runs.contains_key(&key) {
            self.generator();
            self.aux();
            self.data(key.task);
            let (gen, aux) = (self.gen.as_ref().unwrap(), self.aux.as_ref().unwrap());
            let (tr, val) = &self.data[&key.task];
            let cfg = Self::task_config(&key);
            let t = Instant::now();
            let out = train(&cfg, encoder_for(&cfg, gen).unwrap(), gen, aux, tr, val, None).unwrap();
            let seconds = t.elapsed().as_secs_f64();
            let end = out.reports.last().unwrap().clone();
            println!(
                "   info: {} ({} steps, {:.0} s): mse {:.5} perceptual {:.4} id {:.4} offset {:.3}{}",
                key.label(),
                key.steps,
                seconds,
                end.mse,
                end.perceptual,
                end.id_similarity,
                end.offset_norm,
                end.pose_mae.map_or(String::new(), |p| format!(
                    " |yaw| out {p:.4} in {:.4}",
                    end.input_pose_abs.unwrap()
                ))
            );
            self.runs.insert(
                key.clone(),
                Run {
                    reports: out.reports,
                    end,
                    losses: out.losses,
                    encoder: out.encoder,
                    seconds,
                },
            );
        }
        &self.runs[&key]
    }
}

fn ensure(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac1(_: &mut Context) -> Verdict {
    let t = Instant::now();
    let reports = check_all_primitives(GRADCHECK_POINTS, 11).map_err(|e| e.to_string())?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("primitives");
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed(PRIMITIVE_TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    let comp = check_composition(11).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(
        failing.is_empty() && comp.passed(COMPOSITION_TOLERANCE) && secs < GRADCHECK_BUDGET_SECONDS,
        format!(
            "{} primitives, worst {} {:.2e} (< {PRIMITIVE_TOLERANCE:e}), failing {failing:?}; composition {:.2e} (< {COMPOSITION_TOLERANCE:e}); {secs:.1} s (< {GRADCHECK_BUDGET_SECONDS} s)",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            comp.max_rel_err
        ),
    )
}

fn ac2(ctx: &mut Context) -> Verdict {
    let n1024 = num_styles(1024).unwrap();
    let n64 = num_styles(64).unwrap();
    let gen = ctx.generator().clone();
    let (d, s) = (gen.latent_dim(), gen.n_styles());
    let mean = gen.mean_image().unwrap();
    let mut rng = rng_fork(5, 0xac2);
    let mut inputs: Vec<Tensor<f32>> = (0..6)
        .map(|_| normal_tensor::<f32, _>(&mut rng, vec![3, 64, 64], 0.5).map(|v| (v + 0.5).clamp(0.0, 1.0)))
        .collect();
    inputs.extend(ctx.data(Task::Inversion).1.iter().take(6).map(|s| s.condition.clone()));
    let mut shapes_ok = true;
    let mut identical = 0;
    let mut total = 0;
    for v in [Variant::Psp, Variant::NaiveWplus, Variant::W] {
        let e = Encoder::<f32>::new(EncoderConfig::for_generator(v, 64, d, 3), 3).unwrap();
        shapes_ok &= e.encode(&inputs[0]).unwrap().styles().shape() == [s, d];
        let (images, codes) = psp_forward_batch(&e, &gen, &inputs).unwrap();
        shapes_ok &= codes.iter().all(|c| c.styles().shape() == [s, d]);
        for (i, x) in inputs.iter().enumerate() {
            total += 1;
            identical += usize::from(images.select(i) == mean && psp_forward(&e, &gen, x).unwrap().0 == mean);
        }
    }
    ensure(
        n1024 == 18 && n64 == 10 && shapes_ok && identical == total,
        format!(
            "num_styles(1024)={n1024}, num_styles(64)={n64}; encoder output {s}x{d} for all variants: {shapes_ok}; zero-init pSp(x) == G(w̄ replicated) bit-exact for {identical}/{total} inputs"
        ),
    )
}

fn ac3(_: &mut Context) -> Verdict {
    let (n, d) = (10, 64);
    let mut rng = rng_fork(9, 0xac3);
    let mut failures = Vec::new();
    let trials = 200;
    for t in 0..trials {
        let a = LatentCode::w_plus(normal_tensor::<f32, _>(&mut rng, vec![n, d], 1.0)).unwrap();
        let b = LatentCode::w_plus(normal_tensor::<f32, _>(&mut rng, vec![n, d], 1.0)).unwrap();
        let lo = t % n;
        let hi = lo + 1 + (t / n) % (n - lo);
        for alpha in [0.0, 1.0] {
            let m = style_mix(&a, &b, &MixSpec { layers: lo..hi, alpha }).unwrap();
            for i in 0..n {
                let want = if (lo..hi).contains(&i) && alpha == 1.0 {
                    b.row(i)
                } else {
                    a.row(i)
                };
                if m.row(i) != want {
                    failures.push(format!("style_mix α={alpha} row {i}"));
                }
            }
        }
        if interpolate(&a, &b, 1.0).unwrap().styles() != a.styles() {
            failures.push("interpolate α=1".into());
        }
        if interpolate(&a, &b, 0.0).unwrap().styles() != b.styles() {
            failures.push("interpolate α=0".into());
        }
        let w_avg: Vec<f32> = normal_tensor::<f32, _>(&mut rng, vec![d], 1.0).into_vec();
        if truncate(&a, 1.0, &w_avg).unwrap().styles() != a.styles() {
            failures.push("truncate ψ=1".into());
        }
        let t0 = truncate(&a, 0.0, &w_avg).unwrap();
        if (0..n).any(|i| t0.row(i) != w_avg.as_slice()) {
            failures.push("truncate ψ=0".into());
        }
        let r = LatentCode::replicate(a.row(0), n).unwrap();
        if (0..n).any(|i| r.row(i) != a.row(0)) {
            failures.push("replicate".into());
        }
    }
    failures.dedup();
    ensure(
        failures.is_empty(),
        format!("{trials} random code pairs: mix α∈{{0,1}}, interpolate endpoints, truncate ψ∈{{0,1}}, replicate rows; failures {failures:?}"),
    )
}

fn ac4(ctx: &mut Context) -> Verdict {
    let mean = ctx.generator().mean_image().unwrap();
    let (tr, val) = ctx.data(Task::Inversion);
    let n_train = tr.len();
    // zero-init heads: step 0 is the G(w̄) baseline
    let baseline = val.iter().map(|s| mean.mse(&s.target).unwrap() as f64).sum::<f64>() / val.len() as f64;
    let run = ctx.run(RunKey::new(Task::Inversion, Variant::Psp, 1, SMOKE_STEPS));
    let (first, last) = (&run.reports[0], &run.end);
    let finite = run.losses.iter().all(|l| l.is_finite());
    ensure(
        n_train == TRAIN_N
            && run.losses.len() == SMOKE_STEPS
            && last.mse < 0.5 * first.mse
            && last.id_similarity > first.id_similarity
            && (first.mse - baseline).abs() <= 1e-12 * baseline
            && finite
            && run.seconds < SMOKE_BUDGET_SECONDS,
        format!(
            "{n_train} images, {SMOKE_STEPS} steps: held-out mse {:.5} -> {:.5} (ratio {:.3} < 0.5; step 0 = G(w̄) baseline {:.5}); id_similarity {:.4} -> {:.4}; losses finite: {finite}; {:.0} s (< {SMOKE_BUDGET_SECONDS} s)",
            first.mse,
            last.mse,
            last.mse / first.mse,
            baseline,
            first.id_similarity,
            last.id_similarity,
            run.seconds
        ),
    )
}

fn ac5(ctx: &mut Context) -> Verdict {
    let mut holds = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let r: Vec<EvalReport> = [Variant::Psp, Variant::NaiveWplus, Variant::W]
            .into_iter()
            .map(|v| {
                ctx.run(RunKey::new(Task::Inversion, v, seed, ABLATION_STEPS))
                    .end
                    .clone()
            })
            .collect();
        let ordered = r[0].mse < r[1].mse
            && r[1].mse < r[2].mse
            && r[0].perceptual < r[1].perceptual
            && r[1].perceptual < r[2].perceptual;
        holds += usize::from(ordered);
        lines.push(format!(
            "seed {seed}: mse {:.5} / {:.5} / {:.5}, perceptual {:.4} / {:.4} / {:.4} {}",
            r[0].mse,
            r[1].mse,
            r[2].mse,
            r[0].perceptual,
            r[1].perceptual,
            r[2].perceptual,
            if ordered { "ordered" } else { "not ordered" }
        ));
    }
    ensure(
        holds >= 2,
        format!(
            "pSp < naive W+ < W on {holds}/3 seeds ({ABLATION_STEPS} steps); {}",
            lines.join("; ")
        ),
    )
}

fn ac6(ctx: &mut Context) -> Verdict {
    let mut holds = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let on = RunKey::new(Task::Inversion, Variant::Psp, seed, ABLATION_STEPS);
        let off = RunKey {
            id: false,
            ..on.clone()
        };
        let a = ctx.run(on).end.id_similarity;
        let b = ctx.run(off).end.id_similarity;
        holds += usize::from(a > b);
        lines.push(format!("seed {seed}: {a:.4} vs {b:.4}"));
    }
    ensure(
        holds >= 2,
        format!(
            "held-out id_similarity with λ3=0.1 above λ3=0 on {holds}/3 seeds; {}",
            lines.join("; ")
        ),
    )
}

fn ac7(ctx: &mut Context) -> Verdict {
    let off = RunKey::new(Task::Inversion, Variant::Psp, SEEDS[0], ABLATION_STEPS);
    let on = RunKey {
        reg: true,
        ..off.clone()
    };
    let a = ctx.run(on).end.offset_norm;
    let b = ctx.run(off).end.offset_norm;
    ensure(
        a < b,
        format!("held-out mean ‖E(x)‖ with λ4=0.005: {a:.4}, with λ4=0: {b:.4}"),
    )
}

fn ac8(ctx: &mut Context) -> Verdict {
    let mut holds = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let r = &ctx
            .run(RunKey::new(Task::Frontalization, Variant::Psp, seed, TASK_STEPS))
            .end;
        let (out, inp) = (r.pose_mae.unwrap(), r.input_pose_abs.unwrap());
        holds += usize::from(out < inp);
        lines.push(format!("seed {seed}: output {out:.4} vs input {inp:.4}"));
    }
    ensure(
        holds >= 2,
        format!(
            "mean |predicted yaw| of outputs below inputs on {holds}/3 seeds; {}",
            lines.join("; ")
        ),
    )
}

fn ac9(ctx: &mut Context) -> Verdict {
    let key = RunKey::new(Task::Sketch, Variant::Psp, SEEDS[0], TASK_STEPS);
    ctx.run(key.clone());
    let gen = ctx.gen.clone().unwrap();
    let x = ctx.data[&Task::Sketch].1[0].condition.clone();
    let run = &ctx.runs[&key];
    let spec = MixPreset::FineMix.spec(gen.resolution()).unwrap();
    let outs = multimodal(&run.encoder, &gen, &x, 5, 21, &spec).unwrap();
    let images: Vec<Tensor<f32>> = outs.into_iter().map(|(_, img)| img).collect();
    let small: Vec<Tensor<f32>> = images.iter().map(|i| downsample_bicubic(i, 8).unwrap().low).collect();
    let (mut full, mut low, mut distinct, mut pairs) = (0.0, 0.0, 0, 0);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            pairs += 1;
            distinct += usize::from(images[i] != images[j]);
            full += images[i].mse(&images[j]).unwrap() as f64;
            low += small[i].mse(&small[j]).unwrap() as f64;
        }
    }
    full /= pairs as f64;
    low /= pairs as f64;
    ensure(
        distinct == pairs && low < full,
        format!(
            "sketch encoder ({TASK_STEPS} steps, held-out mse {:.5}), 5 fine-style resamples: {distinct}/{pairs} pairs distinct; mean pairwise L2 {low:.3e} at 8x down vs {full:.3e} at full resolution",
            run.end.mse
        ),
    )
}

fn ac10(_: &mut Context) -> Verdict {
    let input = common::fixture_input();
    let actual = common::compute_fixtures(&input);
    let golden = NamedTensors::load(common::fixture_path()).map_err(|e| e.to_string())?;
    let bad = common::mismatches(&golden, &actual);
    let x = common::as_float(&input);
    let x1 = downsample_bicubic(&x, 1).unwrap();
    let identity = x1.low == x && x1.condition == x;
    let big = Tensor::full(vec![3, 256, 256], 0.5f32);
    let x8 = downsample_bicubic(&big, 8).unwrap().low.shape().to_vec();
    ensure(
        bad.is_empty() && identity && x8 == [3, 32, 32],
        format!(
            "{} golden tensors (sketch, bicubic x2..x32, {} masks), mismatches {bad:?}; x1 identity: {identity}; x8 on 256: {x8:?}",
            golden.len(),
            common::MASK_COVERAGES.len()
        ),
    )
}

fn ac11(ctx: &mut Context) -> Verdict {
    let gen = ctx.generator().clone();
    let aux = ctx.aux().clone();
    let (tr, val) = ctx.data(Task::Inversion).clone();
    let cfg = TaskConfig {
        steps: DETERMINISM_STEPS,
        seed: 4,
        eval_every: 0,
        ..TaskConfig::new(Task::Inversion)
    };
    let a = train(&cfg, encoder_for(&cfg, &gen).unwrap(), &gen, &aux, &tr, &val, None).unwrap();
    let b = train(&cfg, encoder_for(&cfg, &gen).unwrap(), &gen, &aux, &tr, &val, None).unwrap();
    let drift = a
        .losses
        .iter()
        .zip(&b.losses)
        .map(|(x, y)| (x - y).abs() / x.abs().max(1e-30))
        .fold(0.0f64, f64::max);
    let bit_exact = a.losses == b.losses;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.ntf");
    Checkpoint::new(
        cfg.clone(),
        DETERMINISM_STEPS,
        a.encoder.clone(),
        gen.clone(),
        Some(a.optimizer.clone()),
    )
    .save(&path)
    .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let before = evaluate(&a.encoder, &gen, &val, &aux, Task::Inversion, DETERMINISM_STEPS, 50).unwrap();
    let after = evaluate(
        &ck.encoder,
        &ck.generator,
        &val,
        &aux,
        Task::Inversion,
        DETERMINISM_STEPS,
        50,
    )
    .unwrap();
    let round_trip = before.same_metrics(&after) && ck.encoder == a.encoder && ck.generator == gen;
    ensure(
        a.losses.len() == DETERMINISM_STEPS && drift <= 1e-5 && round_trip,
        format!(
            "{DETERMINISM_STEPS}-step loss trajectories: max relative drift {drift:.1e} (<= 1e-5), bit-exact: {bit_exact}; save/load/evaluate bit-exact: {round_trip}"
        ),
    )
}

type Criterion = fn(&mut Context) -> Verdict;

fn main() {
    let criteria: [(&str, &str, Criterion); 11] = [
        ("ac1", "gradient suite", ac1),
        ("ac2", "architecture contracts", ac2),
        ("ac3", "latent algebra", ac3),
        ("ac4", "inversion training smoke", ac4),
        ("ac5", "ablation ordering", ac5),
        ("ac6", "identity-loss ablation", ac6),
        ("ac7", "regularization ablation", ac7),
        ("ac8", "frontalization", ac8),
        ("ac9", "multi-modal synthesis", ac9),
        ("ac10", "degradation fixtures", ac10),
        ("ac11", "determinism and persistence", ac11),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let mut ctx = Context::new();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (status, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{} {status} {name} [{:.0} s]: {detail}",
            id.to_uppercase(),
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
