//! Metrics, the variant comparison and ablation runners, and the prompt
//! category checks.
//!
//! All comparisons inside one report share the test split, the prompt
//! samples, the seeds and the training budget. Reports carry no timing
//! data, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{frozen_fingerprint, partition};
use crate::autodiff::kernels::sigmoid;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{resample_nearest, save_checkpoint, Model, ModelConfig, VariantSpec};
use crate::scenes::{generate_dataset, prompted_instances, Dataset, PromptMode, SampleRef, SceneSpec};
use crate::tensor::{Real, Tensor};
use crate::textbank::TextBank;
use crate::trainer::{from_backbone, train, warmup_backbone, TrainConfig, TrainOptions, WarmupConfig};

fn binary(t: &Tensor<f32>, what: &str) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::invalid(format!("{what} is not binary: found {v}"))),
        })
        .collect()
}

/// `|pred ∩ gt| / |pred ∪ gt|`, and 1 when both masks are empty.
pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "iou: shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let (p, g) = (binary(pred, "prediction")?, binary(gt, "ground truth")?);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in p.iter().zip(&g) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean `|p - y|` of a probability map against a binary mask.
pub fn mae(prob: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if prob.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "mae: shapes {:?} and {:?} differ",
            prob.shape(),
            gt.shape()
        )));
    }
    if let Some(bad) = prob.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("mae: probability {bad} outside [0, 1]")));
    }
    let g = binary(gt, "ground truth")?;
    let sum: f64 = prob
        .data()
        .iter()
        .zip(&g)
        .map(|(&p, &y)| (p as f64 - y as u8 as f64).abs())
        .sum();
    Ok(sum / g.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub ious: Vec<f64>,
    /// Mean IoU × 100.
    pub miou: f64,
    pub mae: f64,
    pub count: usize,
    /// Samples that could not be evaluated, with the reason.
    pub skipped: Vec<String>,
}

struct Prediction {
    prob: Tensor<f32>,
    pred: Tensor<f32>,
}

fn predict<T: Real>(
    model: &Model<T>,
    s: &SampleRef<'_>,
    bank: Option<&TextBank>,
    threshold: f64,
) -> Result<Prediction> {
    let t = match (model.variant().uses_text(), bank) {
        (false, _) => None,
        (true, Some(b)) => Some(b.lookup(&s.sample.class)?),
        (true, None) => return Err(Error::config(format!("variant {} needs a text bank", model.variant()))),
    };
    let logits = model.predict(&s.scene.image, &s.sample.points, t)?;
    let prob: Vec<f32> = logits.data().iter().map(|&z| sigmoid(z.to_f64c()) as f32).collect();
    let pred = prob.iter().map(|&p| (p as f64 >= threshold) as u8 as f32).collect();
    Ok(Prediction {
        prob: Tensor::new(logits.shape(), prob)?,
        pred: Tensor::new(logits.shape(), pred)?,
    })
}

fn select<'a>(data: &'a Dataset, mode: Option<PromptMode>) -> Vec<SampleRef<'a>> {
    data.samples()
        .into_iter()
        .filter(|s| mode.is_none_or(|m| s.sample.prompt_mode == m))
        .collect()
}

/// Threshold `sigmoid(logits)` and compare with the class mask at the loss
/// resolution. `mode` restricts evaluation to one prompt mode.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    bank: Option<&TextBank>,
    threshold: f64,
    mode: Option<PromptMode>,
    exec: Exec,
) -> Result<MetricResult> {
    let size = model.config().mask_size();
    let samples = select(data, mode);
    let per = exec.map(&samples, |s| -> Result<(f64, f64)> {
        let p = predict(model, s, bank, threshold)?;
        let gt = resample_nearest(&s.scene.class_mask(&s.sample.class), size)?;
        Ok((iou(&p.pred, &gt)?, mae(&p.prob, &gt)?))
    });
    let mut ious = Vec::new();
    let mut maes = Vec::new();
    let mut skipped = Vec::new();
    for (s, r) in samples.iter().zip(per) {
        match r {
            Ok((i, m)) => {
                ious.push(i);
                maes.push(m);
            }
            Err(e @ Error::UnknownClass { .. }) => {
                skipped.push(format!("scene {} class {}: {e}", s.scene.seed, s.sample.class))
            }
            Err(e) => return Err(e),
        }
    }
    let n = ious.len();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricResult {
        miou: 100.0 * mean(&ious),
        mae: mean(&maes),
        ious,
        count: n,
        skipped,
    })
}

/// Mean over `partial_instances` samples of the fraction of unprompted
/// target-instance pixels predicted positive. Samples whose unprompted
/// instances vanish at the loss resolution are left out.
pub fn unprompted_recall<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    bank: Option<&TextBank>,
    threshold: f64,
    exec: Exec,
) -> Result<f64> {
    let size = model.config().mask_size();
    let samples = select(data, Some(PromptMode::PartialInstances));
    let per = exec.map(&samples, |s| -> Result<Option<f64>> {
        let p = predict(model, s, bank, threshold)?;
        let (mut hit, mut area) = (0usize, 0usize);
        for (j, prompted) in prompted_instances(s.scene, &s.sample.class, &s.sample.points) {
            if prompted {
                continue;
            }
            let m = resample_nearest(&s.scene.instances[j].mask, size)?;
            for (&g, &q) in m.data().iter().zip(p.pred.data()) {
                area += (g > 0.5) as usize;
                hit += (g > 0.5 && q > 0.5) as usize;
            }
        }
        Ok((area > 0).then(|| hit as f64 / area as f64))
    });
    let vals: Vec<f64> = per
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if vals.is_empty() {
        return Err(Error::invalid("no partial_instances samples with unprompted instances"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `value - baseline` with two decimals and an explicit sign.
pub fn format_delta(baseline: f64, value: f64) -> String {
    let d = value - baseline;
    let d = if d.abs() < 0.005 { 0.0 } else { d };
    format!("{d:+.2}")
}

/// The synthetic benchmark and the fine-tuning budget shared by all rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Benchmark {
    pub model: ModelConfig,
    pub warmup: WarmupConfig,
    pub train_spec: SceneSpec,
    pub test_spec: SceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub bank_seed: u64,
    /// Prompt mode the variant and ablation tables are scored on.
    pub eval_mode: PromptMode,
    pub threshold: f64,
}

impl Default for Benchmark {
    fn default() -> Self {
        let scenes = SceneSpec {
            classes: vec!["ring".into(), "cross".into()],
            instances_per_class: [2, 3],
            radius: [6, 9],
            ..SceneSpec::default()
        };
        Benchmark {
            model: ModelConfig::default(),
            warmup: WarmupConfig::default(),
            train_spec: SceneSpec {
                prompt_modes: vec![PromptMode::PartialInstances],
                samples_per_scene: Some(1),
                ..scenes.clone()
            },
            test_spec: SceneSpec {
                prompt_modes: PromptMode::ALL.to_vec(),
                ..scenes
            },
            train_scenes: 200,
            test_scenes: 50,
            train_seed: 0,
            test_seed: 1_000_000,
            epochs: 20,
            lr: 1e-3,
            bank_seed: 0,
            eval_mode: PromptMode::PartialInstances,
            threshold: 0.5,
        }
    }
}

impl Benchmark {
    /// Same benchmark with a smaller budget, for harness checks.
    pub fn quick() -> Self {
        Benchmark {
            warmup: WarmupConfig {
                steps: 150,
                scenes: 32,
                ..WarmupConfig::default()
            },
            train_scenes: 30,
            test_scenes: 10,
            epochs: 3,
            ..Benchmark::default()
        }
    }
}

/// Fail unless the two splits share no scene seed.
pub fn check_split(train: &Dataset, test: &Dataset) -> Result<()> {
    let tr: std::collections::HashSet<u64> = train.seeds().into_iter().collect();
    if let Some(s) = test.seeds().into_iter().find(|s| tr.contains(s)) {
        return Err(Error::invalid(format!(
            "scene seed {s} is in both train and test splits"
        )));
    }
    Ok(())
}

/// Backbone, splits and text bank for one benchmark.
pub struct Prepared {
    pub bench: Benchmark,
    pub backbone: Model<f32>,
    pub train: Dataset,
    pub test: Dataset,
    pub bank: TextBank,
}

impl Prepared {
    pub fn new(bench: &Benchmark, exec: Exec) -> Result<Self> {
        let mut model = bench.model.clone();
        model.validate()?;
        let bank = TextBank::build_synthetic(&bench.train_spec.classes, model.text_dim, bench.bank_seed)?;
        model.text_dim = bank.dim();
        let train = generate_dataset(&bench.train_spec, bench.train_seed, bench.train_scenes, exec)?;
        let test = generate_dataset(&bench.test_spec, bench.test_seed, bench.test_scenes, exec)?;
        check_split(&train, &test)?;
        let backbone = warmup_backbone(&model, &bench.warmup)?;
        Ok(Prepared {
            bench: bench.clone(),
            backbone,
            train,
            test,
            bank,
        })
    }

    pub fn train_config(&self, variant: VariantSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.bench.lr,
            epochs: self.bench.epochs,
            seed,
            variant,
            ..TrainConfig::default()
        }
    }

    fn bank_for(&self, v: VariantSpec) -> Option<&TextBank> {
        v.uses_text().then_some(&self.bank)
    }

    /// Fine-tune one variant from the shared backbone. Variants with nothing
    /// trainable are returned untouched.
    pub fn train_variant(&self, variant: VariantSpec, seed: u64, out: Option<&Path>) -> Result<TrainedRun> {
        check_split(&self.train, &self.test)?;
        let mut model = from_backbone(&self.backbone, variant, seed)?;
        let bank = self.bank_for(variant);
        let fp_before = frozen_fingerprint(model.store(), Some(&self.bank), &variant);
        let mut steps = 0;
        if !model.trainable_ids().is_empty() {
            let opts = TrainOptions {
                out_dir: out.map(Path::to_path_buf),
                ..Default::default()
            };
            steps = train(&self.train, &mut model, bank, &self.train_config(variant, seed), &opts)?.steps;
        } else if let Some(dir) = out {
            save_checkpoint(
                &dir.join("checkpoint"),
                &model,
                &Default::default(),
                serde_json::Value::Null,
            )?;
        }
        let fp_after = frozen_fingerprint(model.store(), Some(&self.bank), &variant);
        Ok(TrainedRun {
            model,
            steps,
            fp_before,
            fp_after,
        })
    }

    pub fn evaluate(&self, model: &Model<f32>, mode: Option<PromptMode>, exec: Exec) -> Result<MetricResult> {
        evaluate(
            model,
            &self.test,
            self.bank_for(model.variant()),
            self.bench.threshold,
            mode,
            exec,
        )
    }
}

pub struct TrainedRun {
    pub model: Model<f32>,
    pub steps: usize,
    /// Frozen partition plus text bank, hashed before and after training.
    pub fp_before: String,
    pub fp_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub variant: String,
    pub miou: f64,
    pub mae: f64,
    pub trainable_params: usize,
    pub seeds: Vec<u64>,
    pub per_seed_miou: Vec<f64>,
    pub miou_std: f64,
    pub failed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub dataset: String,
    pub values: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub study: String,
    pub rows: Vec<ReportRow>,
    pub baseline: String,
    /// `label -> miou - baseline miou`.
    pub deltas: Vec<(String, f64)>,
    pub winner: Option<String>,
    pub budget: Budget,
    pub reference: Vec<Reference>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epochs: usize,
    pub lr: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub eval_mode: PromptMode,
    pub warmup_steps: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn delta(&self, label: &str) -> Option<f64> {
        self.deltas.iter().find(|(l, _)| l == label).map(|(_, d)| *d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = &self.budget;
        writeln!(s, "study: {}  baseline: {}", self.study, self.baseline).unwrap();
        writeln!(
            s,
            "budget: {} epochs, lr {}, {} train / {} test scenes, scored on {} prompts",
            b.epochs, b.lr, b.train_scenes, b.test_scenes, b.eval_mode
        )
        .unwrap();
        writeln!(
            s,
            "{:<16} {:>7} {:>6} {:>7} {:>10} {:>7}  seeds",
            "label", "mIoU", "std", "MAE", "trainable", "delta"
        )
        .unwrap();
        let base = self.row(&self.baseline).map(|r| r.miou).unwrap_or(f64::NAN);
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            writeln!(
                s,
                "{:<16} {:>7.2} {:>6.2} {:>7.4} {:>10} {:>7}  {}{}",
                r.label,
                r.miou,
                r.miou_std,
                r.mae,
                r.trainable_params,
                format_delta(base, r.miou),
                seeds.join(","),
                if r.failed.is_empty() {
                    String::new()
                } else {
                    format!("  FAILED: {}", r.failed.join("; "))
                }
            )
            .unwrap();
        }
        if let Some(w) = &self.winner {
            writeln!(s, "winner: {w}").unwrap();
        }
        for r in &self.reference {
            let vals: Vec<String> = r.values.iter().map(|(l, v)| format!("{l} {v:.2}")).collect();
            writeln!(s, "published full-scale reference ({}): {}", r.dataset, vals.join(", ")).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.txt", self.to_text())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// A named comparison: labelled variants and the row deltas are taken
/// against.
#[derive(Clone, Debug)]
pub struct Study {
    pub name: &'static str,
    pub rows: Vec<(&'static str, VariantSpec)>,
    pub baseline: &'static str,
    pub reference: Vec<Reference>,
}

fn reference(dataset: &str, values: &[(&str, f64)]) -> Reference {
    Reference {
        dataset: dataset.into(),
        values: values.iter().map(|(l, v)| (l.to_string(), *v)).collect(),
    }
}

impl Study {
    pub fn table1() -> Self {
        Study {
            name: "table1",
            rows: vec![
                ("none", VariantSpec::none()),
                ("decoder_only", VariantSpec::decoder_only()),
                ("parallel", VariantSpec::parallel()),
                ("parallel_text", VariantSpec::parallel_text()),
            ],
            baseline: "parallel",
            reference: vec![
                reference(
                    "COCO 1_512",
                    &[
                        ("none", 62.09),
                        ("decoder_only", 67.29),
                        ("parallel", 67.35),
                        ("parallel_text", 67.77),
                    ],
                ),
                reference(
                    "ADE20K 1_64",
                    &[
                        ("none", 65.14),
                        ("decoder_only", 70.32),
                        ("parallel", 71.29),
                        ("parallel_text", 71.38),
                    ],
                ),
            ],
        }
    }

    pub fn injection() -> Self {
        Study {
            name: "injection",
            rows: vec![
                ("prompt_encoder", VariantSpec::inject_prompt()),
                ("image_encoder", VariantSpec::parallel_text()),
                ("mask_decoder", VariantSpec::inject_decoder()),
            ],
            baseline: "image_encoder",
            reference: vec![reference(
                "ADE20K 1_64",
                &[
                    ("prompt_encoder", 71.11),
                    ("image_encoder", 71.38),
                    ("mask_decoder", 70.82),
                ],
            )],
        }
    }

    pub fn placement() -> Self {
        Study {
            name: "placement",
            rows: vec![
                ("mlp_only", VariantSpec::parallel_text()),
                ("mlp_and_mhsa", VariantSpec::text_mlp_mhsa()),
            ],
            baseline: "mlp_only",
            reference: vec![reference(
                "ADE20K 1_64",
                &[("mlp_only", 71.38), ("mlp_and_mhsa", 71.25)],
            )],
        }
    }
}

/// Report plus the trained models, indexed `[row][seed]`; `None` where
/// training failed.
pub struct StudyOutcome {
    pub report: AblationReport,
    pub models: Vec<Vec<Option<Model<f32>>>>,
    pub runs: Vec<Vec<Option<(String, String)>>>,
}

/// Train and score every `(row, seed)` pair. A failed run marks its row and
/// the report is still produced. With `out`, each run's checkpoint and loss
/// curve go to `out/<label>/seed<k>/`.
pub fn run_study(
    prep: &Prepared,
    study: &Study,
    seeds: &[u64],
    exec: Exec,
    out: Option<&Path>,
) -> Result<StudyOutcome> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    check_split(&prep.train, &prep.test)?;
    let jobs: Vec<(usize, u64)> = (0..study.rows.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results = exec.map(&jobs, |&(r, seed)| -> Result<(TrainedRun, MetricResult)> {
        let (label, variant) = study.rows[r];
        let dir = out.map(|o| o.join(label).join(format!("seed{seed}")));
        let run = prep.train_variant(variant, seed, dir.as_deref())?;
        let m = prep.evaluate(&run.model, Some(prep.bench.eval_mode), Exec::Sequential)?;
        Ok((run, m))
    });

    let mut rows = Vec::new();
    let mut models: Vec<Vec<Option<Model<f32>>>> = study.rows.iter().map(|_| Vec::new()).collect();
    let mut runs: Vec<Vec<Option<(String, String)>>> = study.rows.iter().map(|_| Vec::new()).collect();
    let mut it = results.into_iter();
    for (r, (label, variant)) in study.rows.iter().enumerate() {
        let probe = from_backbone(&prep.backbone, *variant, 0)?;
        let trainable = partition(probe.store(), Some(&prep.bank), variant)?.trainable_count;
        let (mut mious, mut maes, mut failed) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in seeds {
            match it.next().expect("one result per job") {
                Ok((run, m)) => {
                    mious.push(m.miou);
                    maes.push(m.mae);
                    runs[r].push(Some((run.fp_before, run.fp_after)));
                    models[r].push(Some(run.model));
                }
                Err(e) => {
                    failed.push(format!("seed {seed}: {e}"));
                    runs[r].push(None);
                    models[r].push(None);
                }
            }
        }
        let (miou, std) = mean_std(&mious);
        rows.push(ReportRow {
            label: label.to_string(),
            variant: variant.to_string(),
            miou,
            mae: mean_std(&maes).0,
            trainable_params: trainable,
            seeds: seeds.to_vec(),
            per_seed_miou: mious,
            miou_std: std,
            failed,
        });
    }
    let base = rows
        .iter()
        .find(|r| r.label == study.baseline)
        .map(|r| r.miou)
        .unwrap_or(f64::NAN);
    let deltas = rows.iter().map(|r| (r.label.clone(), r.miou - base)).collect();
    let winner = rows
        .iter()
        .filter(|r| r.miou.is_finite())
        .fold(None::<&ReportRow>, |best, r| match best {
            Some(b) if b.miou >= r.miou => Some(b),
            _ => Some(r),
        })
        .map(|r| r.label.clone());
    let b = &prep.bench;
    Ok(StudyOutcome {
        report: AblationReport {
            study: study.name.to_string(),
            rows,
            baseline: study.baseline.to_string(),
            deltas,
            winner,
            budget: Budget {
                epochs: b.epochs,
                lr: b.lr,
                train_scenes: b.train_scenes,
                test_scenes: b.test_scenes,
                eval_mode: b.eval_mode,
                warmup_steps: b.warmup.steps,
            },
            reference: study.reference.clone(),
        },
        models,
        runs,
    })
}

pub fn run_table1(prep: &Prepared, seeds: &[u64], exec: Exec, out: Option<&Path>) -> Result<StudyOutcome> {
    if seeds.len() < 3 {
        return Err(Error::config("the variant comparison needs at least 3 seeds"));
    }
    run_study(prep, &Study::table1(), seeds, exec, out)
}

pub fn run_injection_ablation(prep: &Prepared, seeds: &[u64], exec: Exec, out: Option<&Path>) -> Result<StudyOutcome> {
    run_study(prep, &Study::injection(), seeds, exec, out)
}

pub fn run_placement_ablation(prep: &Prepared, seeds: &[u64], exec: Exec, out: Option<&Path>) -> Result<StudyOutcome> {
    run_study(prep, &Study::placement(), seeds, exec, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub metric: String,
    pub baseline: f64,
    pub text: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub seeds: usize,
    pub rows: Vec<CategoryRow>,
}

impl CategoryReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:<20} {:>9} {:>9} {:>8}  result\n",
            "category", "metric", "baseline", "text", "delta"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:<12} {:<20} {:>9.4} {:>9.4} {:>8.4}  {}",
                r.category,
                r.metric,
                r.baseline,
                r.text,
                r.delta,
                if r.pass { "pass" } else { "fail" }
            )
            .unwrap();
        }
        s
    }
}

/// Compare paired baseline and text-conditioned models (one pair per seed)
/// on edge, interior and mixed prompts (mIoU) and on unprompted-instance
/// recall. A category passes when the text model is strictly better on the
/// mean over pairs.
pub fn category_tests(
    baseline: &[&Model<f32>],
    text: &[&Model<f32>],
    test: &Dataset,
    bank: &TextBank,
    threshold: f64,
    exec: Exec,
) -> Result<CategoryReport> {
    if baseline.len() != text.len() || baseline.is_empty() {
        return Err(Error::invalid(
            "category tests need one baseline and one text model per seed",
        ));
    }
    let bank_for = |m: &Model<f32>| m.variant().uses_text().then_some(bank);
    let cats = [
        ("cat1", "edge mIoU", Some(PromptMode::Edge)),
        ("cat2", "interior mIoU", Some(PromptMode::Interior)),
        ("cat3", "mixed mIoU", Some(PromptMode::Mixed)),
        ("cat4", "unprompted recall", None),
    ];
    let mut rows = Vec::new();
    for (category, metric, mode) in cats {
        let score = |m: &Model<f32>| -> Result<f64> {
            match mode {
                Some(md) => Ok(evaluate(m, test, bank_for(m), threshold, Some(md), exec)?.miou),
                None => unprompted_recall(m, test, bank_for(m), threshold, exec),
            }
        };
        let (mut b, mut t) = (0.0, 0.0);
        for (mb, mt) in baseline.iter().zip(text) {
            b += score(mb)?;
            t += score(mt)?;
        }
        let n = baseline.len() as f64;
        let (b, t) = (b / n, t / n);
        rows.push(CategoryRow {
            category: category.into(),
            metric: metric.into(),
            baseline: b,
            text: t,
            delta: t - b,
            pass: t > b,
        });
    }
    Ok(CategoryReport {
        seeds: baseline.len(),
        rows,
    })
}
