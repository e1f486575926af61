//! The `ptx` command line.
//!
//! Human-readable progress goes to stdout, errors to stderr, and every
//! machine-readable result to files under `--out`, next to a `run.json`
//! manifest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adapters::partition;
use crate::autodiff::gradcheck::{grad_check, GradCheckConfig};
use crate::error::{Error, Result};
use crate::eval::{
    category_tests, evaluate, run_injection_ablation, run_placement_ablation, run_study, run_table1, Benchmark,
    Prepared, Study, StudyOutcome,
};
use crate::exec::Exec;
use crate::model::{
    load_checkpoint, read_manifest_header, resample_nearest, Model, ModelConfig, VariantSpec, VARIANT_NAMES,
};
use crate::scenes::{generate_dataset, read_dataset, sample_prompts, write_dataset, PromptMode, SceneSpec};
use crate::tensor::{Real, Tensor};
use crate::textbank::TextBank;
use crate::trainer::{from_backbone, resume, train, warmup_backbone, TrainConfig, TrainOptions, WarmupConfig};

pub const MANIFEST_FILE: &str = "run.json";
pub const PRECISION_ENV: &str = "PTX_PRECISION";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "ptx",
    version,
    about = "Frozen micro-ViT segmenter with text-conditioned adapters"
)]
pub struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    Gen(GenArgs),
    /// Build or import a class text-embedding bank.
    Bank(BankArgs),
    /// Train the backbone that adapters are fitted onto.
    Warmup(WarmupArgs),
    /// Fine-tune a variant.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run a variant comparison or ablation study.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Count trainable and frozen parameters.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene spec JSON; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct BankArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names for a synthetic bank.
    #[arg(long, value_delimiter = ',', conflicts_with = "import")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = ModelConfig::default().text_dim)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bank directory or `{class: [f32, ...]}` JSON of precomputed embeddings.
    #[arg(long)]
    pub import: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct WarmupArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Warm-up config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's variant.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Bank directory or embeddings JSON; required by text variants.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Checkpoint from `ptx warmup`; a default warm-up runs when omitted.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Model config JSON, used only when no backbone is given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a run from this training checkpoint.
    #[arg(long, conflicts_with = "backbone")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (a training output or its `checkpoint/`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Score only samples with this prompt mode.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StudyName {
    Table1,
    Injection,
    Placement,
    Categories,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub study: StudyName,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Benchmark JSON; the default benchmark applies when omitted.
    #[arg(long, conflicts_with = "quick")]
    pub bench: Option<PathBuf>,
    /// Small budget for checking the harness.
    #[arg(long)]
    pub quick: bool,
    /// Also save every trained checkpoint under `runs/`.
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "parallel_text")]
    pub variant: String,
    #[arg(long, default_value_t = 32)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "parallel_text")]
    pub variant: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_ENV) {
            Err(_) => Ok(Precision::F32),
            Ok(v) => match v.as_str() {
                "f32" => Ok(Precision::F32),
                "f64" => Ok(Precision::F64),
                other => Err(Error::config(format!("{PRECISION_ENV}={other:?}; expected f32 or f64"))),
            },
        }
    }
}

/// Record of one command invocation, written last.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub versions: Value,
    pub outputs: Vec<String>,
    pub duration_ms: u128,
}

fn versions() -> Value {
    json!({
        "ptx-core": env!("CARGO_PKG_VERSION"),
        "tensor_format": "PTX1",
    })
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let body = serde_json::to_string_pretty(v).map_err(|e| Error::invalid(e.to_string()))? + "\n";
    write_atomic(path, body.as_bytes())
}

struct Run {
    command: &'static str,
    started: Instant,
    out: PathBuf,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            command,
            started: Instant::now(),
            out: out.to_path_buf(),
        })
    }

    fn finish(self, config: Value, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            config,
            seed,
            versions: versions(),
            outputs: outputs.iter().map(|o| self.out.join(o).display().to_string()).collect(),
            duration_ms: self.started.elapsed().as_millis(),
        };
        write_json(&self.out.join(MANIFEST_FILE), &m)
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    if !path.exists() {
        return Err(Error::config(format!("{} does not exist", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} {} does not exist", path.display())))
    }
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg: ModelConfig = match path {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn variant(name: &str) -> Result<VariantSpec> {
    name.parse()
}

fn load_bank(path: &Path) -> Result<TextBank> {
    require(path, "bank")?;
    TextBank::import_bank(path)
}

/// The bank a variant runs with: required by text variants and refused by
/// `none`, so text never leaks into the untuned baseline.
fn resolve_bank(v: VariantSpec, path: Option<&Path>) -> Result<Option<TextBank>> {
    match (v.uses_text(), path) {
        (true, Some(p)) => Ok(Some(load_bank(p)?)),
        (true, None) => Err(Error::config(format!("variant {v} needs --bank"))),
        (false, Some(_)) if v == VariantSpec::none() => Err(Error::config("variant none does not take --bank")),
        (false, _) => Ok(None),
    }
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join("checkpoint");
    if nested.join(crate::model::CHECKPOINT_MANIFEST).exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

/// Parse `args` and run the command; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let precision = Precision::from_env()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, exec).map(|_| 0),
        Command::Bank(a) => cmd_bank(a).map(|_| 0),
        Command::Warmup(a) => cmd_warmup(a).map(|_| 0),
        Command::Train(a) => match precision {
            Precision::F32 => cmd_train::<f32>(a, precision),
            Precision::F64 => cmd_train::<f64>(a, precision),
        }
        .map(|_| 0),
        Command::Eval(a) => match precision {
            Precision::F32 => cmd_eval::<f32>(a, exec, precision),
            Precision::F64 => cmd_eval::<f64>(a, exec, precision),
        }
        .map(|_| 0),
        Command::Ablate(a) => cmd_ablate(a, exec).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a).map(|_| 0),
    }
}

pub fn cmd_gen(a: &GenArgs, exec: Exec) -> Result<()> {
    let spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    spec.validate()?;
    let data = generate_dataset(&spec, a.seed, a.count, exec)?;
    let staging = a.out.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    write_dataset(&data, &staging)?;
    if a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    fs::rename(&staging, &a.out).map_err(|e| Error::io(&a.out, e))?;
    println!("{} scenes, {} samples", data.records.len(), data.samples().len());
    for (class, n) in data.class_counts() {
        println!("  {class:<10} {n} instances");
    }
    let run = Run::start("gen", &a.out)?;
    run.finish(
        json!({ "spec": spec, "count": a.count }),
        Some(a.seed),
        &[crate::scenes::SCENES_FILE, "images", "masks"],
    )
}

pub fn cmd_bank(a: &BankArgs) -> Result<()> {
    let bank = match &a.import {
        Some(p) => load_bank(p)?,
        None => {
            if a.classes.is_empty() {
                return Err(Error::config("give --classes or --import"));
            }
            TextBank::build_synthetic(&a.classes, a.dim, a.seed)?
        }
    };
    let run = Run::start("bank", &a.out)?;
    bank.write(&a.out)?;
    println!(
        "{} classes, dim {}, max |cos| {:.3}",
        bank.len(),
        bank.dim(),
        bank.max_abs_cosine()
    );
    run.finish(
        json!({ "classes": bank.class_names(), "dim": bank.dim(), "import": a.import }),
        a.import.is_none().then_some(a.seed),
        &["manifest.json", "embeddings.ptx"],
    )
}

pub fn cmd_warmup(a: &WarmupArgs) -> Result<()> {
    let cfg = model_config(a.model.as_deref())?;
    let mut w: WarmupConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WarmupConfig::default(),
    };
    if let Some(s) = a.seed {
        w.seed = s;
    }
    let run = Run::start("warmup", &a.out)?;
    println!("warm-up: {} steps on {} scenes", w.steps, w.scenes);
    let model = warmup_backbone::<f32>(&cfg, &w)?;
    crate::model::save_checkpoint(
        &a.out.join("checkpoint"),
        &model,
        &Default::default(),
        json!({ "warmup": w }),
    )?;
    run.finish(json!({ "model": cfg, "warmup": w }), Some(w.seed), &["checkpoint"])
}

fn backbone<T: Real>(a: &TrainArgs, text_dim: Option<usize>) -> Result<Model<T>> {
    let mut bb = match &a.backbone {
        Some(p) => {
            let dir = checkpoint_dir(p);
            require(&dir.join(crate::model::CHECKPOINT_MANIFEST), "backbone checkpoint")?;
            load_checkpoint::<T>(&dir)?.model
        }
        None => {
            let cfg = model_config(a.model.as_deref())?;
            println!("no --backbone: running the default warm-up");
            warmup_backbone::<T>(&cfg, &WarmupConfig::default())?
        }
    };
    if let Some(d) = text_dim.filter(|&d| d != bb.config().text_dim) {
        let mut cfg = bb.config().clone();
        cfg.text_dim = d;
        let mut m = Model::<T>::new(&cfg, bb.variant(), 0)?;
        m.transplant(bb.store());
        bb = m;
    }
    Ok(bb)
}

pub fn cmd_train<T: Real>(a: &TrainArgs, precision: Precision) -> Result<()> {
    require(&a.data, "dataset")?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.variant = variant(v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let bank = resolve_bank(cfg.variant, a.bank.as_deref())?;
    let data = read_dataset(&a.data)?;
    let run = Run::start("train", &a.out)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        max_steps: a.max_steps,
        log_every: a.log_every,
    };
    println!(
        "training {} on {} samples ({precision:?})",
        cfg.variant,
        data.samples().len()
    );
    let (model, outcome) = match &a.resume {
        Some(r) => {
            let dir = checkpoint_dir(r);
            require(&dir.join(crate::model::CHECKPOINT_MANIFEST), "checkpoint")?;
            resume::<T>(&dir, &data, bank.as_ref(), &cfg, &opts)?
        }
        None => {
            let bb = backbone::<T>(a, bank.as_ref().map(TextBank::dim))?;
            let mut model = from_backbone(&bb, cfg.variant, cfg.seed)?;
            let out = train(&data, &mut model, bank.as_ref(), &cfg, &opts)?;
            (model, out)
        }
    };
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.1, last.1, outcome.steps);
    }
    let p = partition(model.store(), bank.as_ref(), &cfg.variant)?;
    println!(
        "trainable {} / {} ({:.2}%)",
        p.trainable_count,
        p.total(),
        100.0 * p.trainable_fraction()
    );
    run.finish(
        json!({
            "train": cfg,
            "model": model.config(),
            "precision": precision,
            "data": a.data,
            "bank": a.bank,
            "backbone": a.backbone,
            "resume": a.resume,
            "max_steps": a.max_steps,
            "frozen_fingerprint": outcome.frozen_fingerprint,
        }),
        Some(cfg.seed),
        &["checkpoint", "loss.csv"],
    )
}

pub fn cmd_eval<T: Real>(a: &EvalArgs, exec: Exec, precision: Precision) -> Result<()> {
    let dir = checkpoint_dir(&a.checkpoint);
    require(&dir.join(crate::model::CHECKPOINT_MANIFEST), "checkpoint")?;
    require(&a.data, "dataset")?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::config(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    let mode: Option<PromptMode> = a.mode.as_deref().map(str::parse).transpose()?;
    let (_, v) = read_manifest_header(&dir)?;
    let bank = match (&a.bank, v.uses_text()) {
        (Some(p), _) => Some(load_bank(p)?),
        (None, true) => return Err(Error::config(format!("variant {v} needs --bank"))),
        (None, false) => None,
    };
    let model = load_checkpoint::<T>(&dir)?.model;
    let data = read_dataset(&a.data)?;
    let run = Run::start("eval", &a.out)?;
    let m = evaluate(&model, &data, bank.as_ref(), a.threshold, mode, exec)?;
    println!(
        "{v}: mIoU {:.2}  MAE {:.4}  over {} samples ({} skipped)",
        m.miou,
        m.mae,
        m.count,
        m.skipped.len()
    );
    for s in &m.skipped {
        println!("  skipped {s}");
    }
    write_json(&a.out.join("metrics.json"), &m)?;
    run.finish(
        json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "bank": a.bank,
            "threshold": a.threshold,
            "mode": mode,
            "precision": precision,
        }),
        None,
        &["metrics.json"],
    )
}

fn categories_study() -> Study {
    Study {
        name: "categories",
        rows: vec![
            ("parallel", VariantSpec::parallel()),
            ("parallel_text", VariantSpec::parallel_text()),
        ],
        baseline: "parallel",
        reference: Vec::new(),
    }
}

pub fn cmd_ablate(a: &AblateArgs, exec: Exec) -> Result<()> {
    let bench: Benchmark = match (&a.bench, a.quick) {
        (Some(p), _) => read_json(p)?,
        (None, true) => Benchmark::quick(),
        (None, false) => Benchmark::default(),
    };
    let run = Run::start("ablate", &a.out)?;
    println!(
        "preparing benchmark: {} train / {} test scenes, warm-up {} steps",
        bench.train_scenes, bench.test_scenes, bench.warmup.steps
    );
    let prep = Prepared::new(&bench, exec)?;
    let runs_dir = a.save_models.then(|| a.out.join("runs"));
    let runs = runs_dir.as_deref();
    let outcome: StudyOutcome = match a.study {
        StudyName::Table1 => run_table1(&prep, &a.seeds, exec, runs)?,
        StudyName::Injection => run_injection_ablation(&prep, &a.seeds, exec, runs)?,
        StudyName::Placement => run_placement_ablation(&prep, &a.seeds, exec, runs)?,
        StudyName::Categories => run_study(&prep, &categories_study(), &a.seeds, exec, runs)?,
    };
    outcome.report.write(&a.out)?;
    print!("{}", outcome.report.to_text());
    let mut outputs = vec!["report.json", "report.txt"];
    if a.study == StudyName::Categories {
        let pairs: Vec<_> = outcome.models[0]
            .iter()
            .zip(&outcome.models[1])
            .filter_map(|(b, t)| b.as_ref().zip(t.as_ref()))
            .collect();
        if pairs.is_empty() {
            return Err(Error::invalid("every training run failed; no models to compare"));
        }
        let (b, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let cat = category_tests(&b, &t, &prep.test, &prep.bank, bench.threshold, exec)?;
        write_json(&a.out.join("categories.json"), &cat)?;
        let text = cat.to_text();
        write_atomic(&a.out.join("categories.txt"), text.as_bytes())?;
        print!("{text}");
        outputs.extend(["categories.json", "categories.txt"]);
    }
    if a.save_models {
        outputs.push("runs");
    }
    run.finish(
        json!({ "study": format!("{:?}", a.study).to_lowercase(), "bench": bench, "seeds": a.seeds }),
        None,
        &outputs,
    )
}

/// Default-size check model: zero up-projections are replaced by small
/// random values so every adapter path carries gradient.
pub fn gradcheck_model(cfg: &ModelConfig, v: VariantSpec, seed: u64) -> Result<Model<f64>> {
    let mut m = Model::<f64>::new(cfg, v, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in m.trainable_ids() {
        let name = m.store().name(id).to_string();
        if name.ends_with(".w_up") || name.ends_with(".w_2") {
            for x in m.store_mut().get_mut(id).data_mut() {
                *x = r.gen_range(-0.1..0.1);
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Serialize)]
pub struct GradcheckOutput {
    pub variant: String,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub params: Vec<crate::autodiff::gradcheck::ParamCheck>,
}

/// Gradient check of every trainable tensor of `v` at 64-bit on one
/// generated scene.
pub fn gradcheck(cfg: &ModelConfig, v: VariantSpec, coords: usize, seed: u64) -> Result<GradcheckOutput> {
    if coords == 0 {
        return Err(Error::config("--coords must be positive"));
    }
    let model = gradcheck_model(cfg, v, seed)?;
    let spec = SceneSpec {
        classes: vec!["disk".into(), "square".into()],
        image_size: cfg.image_size,
        ..SceneSpec::default()
    };
    let data = generate_dataset(&spec, seed, 1, Exec::Sequential)?;
    let scene = &data.records[0].scene;
    let class = scene.classes_present()[0].clone();
    let points = sample_prompts(scene, &class, spec.points, PromptMode::Interior, seed)?;
    let gt = resample_nearest(&scene.class_mask(&class), cfg.mask_size())?;
    let bank = TextBank::build_synthetic(&spec.classes, cfg.text_dim, seed)?;
    let t = v.uses_text().then(|| bank.lookup(&class)).transpose()?;
    let params: Vec<(String, Tensor<f64>)> = model
        .trainable_ids()
        .into_iter()
        .map(|id| (model.store().name(id).to_string(), model.store().get(id).clone()))
        .collect();
    let gc = GradCheckConfig {
        coords_per_tensor: coords,
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&params, &gc, |tape, vars| {
        let p = model.bind_with(tape, vars)?;
        Ok(model.forward(tape, &p, &scene.image, &points, &gt, t)?.1)
    })?;
    Ok(GradcheckOutput {
        variant: v.to_string(),
        worst: report.worst,
        tolerance: GRADCHECK_TOLERANCE,
        pass: report.worst <= GRADCHECK_TOLERANCE,
        params: report.params,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let cfg = model_config(a.model.as_deref())?;
    let v = variant(&a.variant)?;
    let run = a.out.as_deref().map(|o| Run::start("gradcheck", o)).transpose()?;
    let out = gradcheck(&cfg, v, a.coords, a.seed)?;
    for p in &out.params {
        println!(
            "{:<28} {:>4} coords  max rel err {:.3e}",
            p.name, p.coords, p.max_rel_err
        );
    }
    println!(
        "{} at f64: worst relative error {:.3e} (tolerance {:.0e}) {}",
        out.variant,
        out.worst,
        GRADCHECK_TOLERANCE,
        if out.pass { "pass" } else { "FAIL" }
    );
    if let Some(run) = run {
        write_json(&run.out.join("gradcheck.json"), &out)?;
        run.finish(
            json!({ "model": cfg, "variant": out.variant, "coords": a.coords }),
            Some(a.seed),
            &["gradcheck.json"],
        )?;
    }
    Ok(if out.pass { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
pub struct ParamsOutput {
    pub variant: String,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub fraction: f64,
    pub trainable_tensors: Vec<String>,
}

pub fn params(cfg: &ModelConfig, v: VariantSpec) -> Result<ParamsOutput> {
    let m = Model::<f32>::new(cfg, v, 0)?;
    let p = partition(m.store(), None, &v)?;
    Ok(ParamsOutput {
        variant: v.to_string(),
        trainable: p.trainable_count,
        frozen: p.frozen_count,
        total: p.total(),
        fraction: p.trainable_fraction(),
        trainable_tensors: p.trainable,
    })
}

pub fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let cfg = model_config(a.model.as_deref())?;
    let names: Vec<&str> = if a.variant == "all" {
        VARIANT_NAMES.to_vec()
    } else {
        vec![a.variant.as_str()]
    };
    let run = a.out.as_deref().map(|o| Run::start("params", o)).transpose()?;
    let mut all = Vec::new();
    for n in names {
        let p = params(&cfg, variant(n)?)?;
        println!(
            "{:<15} trainable {:>7}  frozen {:>7}  total {:>7}  fraction {:.2}%",
            p.variant,
            p.trainable,
            p.frozen,
            p.total,
            100.0 * p.fraction
        );
        all.push(p);
    }
    if let Some(run) = run {
        write_json(&run.out.join("params.json"), &all)?;
        run.finish(json!({ "model": cfg, "variant": a.variant }), None, &["params.json"])?;
    }
    Ok(())
}
