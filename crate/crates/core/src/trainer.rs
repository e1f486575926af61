//! Adam fine-tuning over the trainable partition, with checkpoints and
//! exact resume.
//!
//! Step `s` (1-based) uses sample `perm_e[(s - 1) % n]` where `perm_e` is a
//! permutation seeded by `(seed, epoch)`. Nothing else carries random state,
//! so a run restarted from a checkpoint replays the same schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapters::frozen_fingerprint;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, VariantSpec};
use crate::params::ParamId;
use crate::scenes::{generate_dataset, Dataset, PaletteMode, PromptMode, SampleRef, SceneSpec};
use crate::tensor::{Real, Tensor};
use crate::textbank::TextBank;

fn ser_variant<S: Serializer>(v: &VariantSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn de_variant<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<VariantSpec, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(serialize_with = "ser_variant", deserialize_with = "de_variant")]
    pub variant: VariantSpec,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            variant: VariantSpec::parallel_text(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("only batch_size 1 is supported"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        self.variant.validate()
    }

    /// Fields that must agree between a checkpoint and a resume request.
    /// `epochs` and `checkpoint_every` may change.
    pub fn resume_diff(&self, other: &TrainConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        for (k, va) in a.as_object().unwrap() {
            if k == "epochs" || k == "checkpoint_every" {
                continue;
            }
            let vb = &b[k];
            if va != vb {
                out.push(format!("{k}: checkpoint {va} vs requested {vb}"));
            }
        }
        out
    }
}

/// Adam moments for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        names: &[&str],
        lr: f64,
        betas: [f64; 2],
        eps: f64,
    ) -> Result<()> {
        let step = self.step + 1;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", names.get(i).copied().unwrap_or("?")),
                step,
            });
        }
        self.step = step;
        let (b1, b2) = (betas[0], betas[1]);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let (b1t, b2t, lrt, epst) = (T::from_f64c(b1), T::from_f64c(b2), T::from_f64c(lr), T::from_f64c(eps));
        let (c1t, c2t) = (T::from_f64c(c1), T::from_f64c(c2));
        let one = T::one();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                let mh = *m / c1t;
                let vh = *v / c2t;
                *w -= lrt * mh / (vh.sqrt() + epst);
            }
        }
        Ok(())
    }
}

/// Where and how long a run goes.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `checkpoint/` and `loss.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this global step even if epochs remain.
    pub max_steps: Option<usize>,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `(step, loss)`, 1-based steps.
    pub losses: Vec<(usize, f64)>,
    pub steps: usize,
    pub frozen_fingerprint: String,
}

/// Per-epoch sample order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, l) in losses {
        writeln!(s, "{step},{l:?}").unwrap();
    }
    s
}

fn text_for<'a>(variant: &VariantSpec, bank: Option<&'a TextBank>, class: &str) -> Result<Option<&'a [f32]>> {
    if !variant.uses_text() {
        return Ok(None);
    }
    let bank = bank.ok_or_else(|| Error::config(format!("variant {variant} needs a text bank")))?;
    Ok(Some(bank.lookup(class)?))
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn state_tensors<T: Real>(model: &Model<T>, ids: &[ParamId], adam: &AdamState<T>) -> IndexMap<String, Tensor<f32>> {
    let mut out = IndexMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let name = model.store().name(id);
        out.insert(format!("{ADAM_M}{name}"), adam.m[i].cast());
        out.insert(format!("{ADAM_V}{name}"), adam.v[i].cast());
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    step: usize,
    train_config: TrainConfig,
    frozen_fingerprint: String,
}

fn save<T: Real>(
    dir: &Path,
    model: &Model<T>,
    ids: &[ParamId],
    adam: &AdamState<T>,
    cfg: &TrainConfig,
    fp: &str,
) -> Result<()> {
    let meta = RunMeta {
        step: adam.step,
        train_config: cfg.clone(),
        frozen_fingerprint: fp.to_string(),
    };
    save_checkpoint(
        dir,
        model,
        &state_tensors(model, ids, adam),
        serde_json::to_value(meta).expect("meta serializes"),
    )
}

fn write_losses(out: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let p = out.join("loss.csv");
    fs::write(&p, loss_csv(losses)).map_err(|e| Error::io(&p, e))
}

/// Core loop shared by fine-tuning and the backbone warm-up.
#[allow(clippy::too_many_arguments)]
fn run<T: Real>(
    samples: &[SampleRef<'_>],
    model: &mut Model<T>,
    bank: Option<&TextBank>,
    ids: &[ParamId],
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    fp: &str,
) -> Result<Vec<(usize, f64)>> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let total = n * cfg.epochs;
    let end = opts.max_steps.map_or(total, |m| m.min(total));
    let names: Vec<String> = ids.iter().map(|&id| model.store().name(id).to_string()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let ckpt = opts.out_dir.as_ref().map(|d| d.join("checkpoint"));
    let mut losses = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;

    while adam.step < end {
        let s = adam.step;
        let epoch = s / n;
        if epoch != order_epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let smp = samples[order[s % n]];
        let gt = smp.scene.class_mask(&smp.sample.class);
        let t = text_for(&model.variant(), bank, &smp.sample.class)?;
        let (loss, grads) = model.loss_and_grads_for(ids, &smp.scene.image, &smp.sample.points, &gt, t)?;
        let loss = loss.to_f64c();
        if !loss.is_finite() {
            if let Some(dir) = &ckpt {
                save(dir, model, ids, adam, cfg, fp)?;
            }
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: s + 1,
            });
        }
        let mut params = model.store_mut().many_mut(ids);
        if let Err(e) = adam.update(&mut params, &grads, &name_refs, cfg.lr, cfg.betas, cfg.eps) {
            if let Some(dir) = &ckpt {
                save(dir, model, ids, adam, cfg, fp)?;
            }
            return Err(e);
        }
        losses.push((adam.step, loss));
        if opts.log_every > 0 && adam.step.is_multiple_of(opts.log_every) {
            println!("step {:>6}/{end}  loss {loss:.5}", adam.step);
        }
        if let Some(dir) = &ckpt {
            if cfg.checkpoint_every > 0 && adam.step.is_multiple_of(cfg.checkpoint_every) {
                save(dir, model, ids, adam, cfg, fp)?;
            }
        }
    }
    Ok(losses)
}

/// Fine-tune the variant's trainable partition.
pub fn train<T: Real>(
    data: &Dataset,
    model: &mut Model<T>,
    bank: Option<&TextBank>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.variant != model.variant() {
        return Err(Error::config(format!(
            "config variant {} does not match model variant {}",
            cfg.variant,
            model.variant()
        )));
    }
    let ids = model.trainable_ids();
    let shapes: Vec<&[usize]> = ids.iter().map(|&id| model.store().get(id).shape()).collect();
    let mut adam = AdamState::new(&shapes);
    continue_training(data, model, bank, cfg, opts, &ids, &mut adam, None)
}

#[allow(clippy::too_many_arguments)]
fn continue_training<T: Real>(
    data: &Dataset,
    model: &mut Model<T>,
    bank: Option<&TextBank>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    ids: &[ParamId],
    adam: &mut AdamState<T>,
    expected_fp: Option<&str>,
) -> Result<TrainOutcome> {
    let variant = model.variant();
    let fp = frozen_fingerprint(model.store(), bank, &variant);
    if let Some(want) = expected_fp {
        if want != fp {
            return Err(Error::invalid(
                "frozen weights or text bank differ from the checkpoint's",
            ));
        }
    }
    if let Some(out) = &opts.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let samples = data.samples();
    let losses = run(&samples, model, bank, ids, adam, cfg, opts, &fp)?;
    let after = frozen_fingerprint(model.store(), bank, &variant);
    if after != fp {
        return Err(Error::invalid("frozen partition changed during training"));
    }
    if let Some(out) = &opts.out_dir {
        save(&out.join("checkpoint"), model, ids, adam, cfg, &fp)?;
        write_losses(out, &losses)?;
    }
    Ok(TrainOutcome {
        steps: adam.step,
        losses,
        frozen_fingerprint: fp,
    })
}

/// A model restored from a checkpoint together with its optimizer state.
pub struct Resumed<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub frozen_fingerprint: String,
}

pub fn load_training_state<T: Real>(dir: &Path) -> Result<Resumed<T>> {
    let ck = load_checkpoint::<T>(dir)?;
    let meta: RunMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::format(dir, format!("checkpoint has no training state: {e}")))?;
    let ids = ck.model.trainable_ids();
    let mut adam = AdamState {
        step: meta.step,
        m: Vec::with_capacity(ids.len()),
        v: Vec::with_capacity(ids.len()),
    };
    for &id in &ids {
        let name = ck.model.store().name(id);
        for (prefix, dst) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
            let t = ck
                .state
                .get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::format(dir, format!("missing optimizer state for {name}")))?;
            dst.push(t.cast());
        }
    }
    Ok(Resumed {
        model: ck.model,
        adam,
        config: meta.train_config,
        frozen_fingerprint: meta.frozen_fingerprint,
    })
}

/// Continue the run saved in `checkpoint` under `cfg`.
pub fn resume<T: Real>(
    checkpoint: &Path,
    data: &Dataset,
    bank: Option<&TextBank>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainOutcome)> {
    cfg.validate()?;
    let Resumed {
        mut model,
        mut adam,
        config,
        frozen_fingerprint,
    } = load_training_state::<T>(checkpoint)?;
    let diff = config.resume_diff(cfg);
    if !diff.is_empty() {
        return Err(Error::config(format!(
            "checkpoint does not match the requested run: {}",
            diff.join("; ")
        )));
    }
    let ids = model.trainable_ids();
    let out = continue_training(
        data,
        &mut model,
        bank,
        cfg,
        opts,
        &ids,
        &mut adam,
        Some(&frozen_fingerprint),
    )?;
    Ok((model, out))
}

/// Settings of the backbone warm-up that stands in for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub scenes: usize,
    pub scene_spec: SceneSpec,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: 300,
            lr: 1e-3,
            seed: 0,
            scenes: 64,
            scene_spec: SceneSpec {
                classes: ["disk", "square", "triangle", "cross", "ring"]
                    .map(String::from)
                    .to_vec(),
                classes_per_scene: Some(1),
                instances_per_class: [1, 2],
                palette_mode: PaletteMode::Distinct,
                prompt_modes: vec![PromptMode::Interior],
                ..SceneSpec::default()
            },
        }
    }
}

/// Scene seeds used by the warm-up; disjoint from benchmark seeds.
pub const WARMUP_SEED_BASE: u64 = 9_000_000;

/// Train every tensor of a text-free, adapter-free model on easy
/// single-class scenes. The result is the frozen backbone shared by all
/// fine-tuning variants.
pub fn warmup_backbone<T: Real>(cfg: &ModelConfig, w: &WarmupConfig) -> Result<Model<T>> {
    let mut model = Model::<T>::new(cfg, VariantSpec::none(), w.seed)?;
    let data = generate_dataset(
        &w.scene_spec,
        WARMUP_SEED_BASE + w.seed * 10_000,
        w.scenes,
        Exec::Parallel,
    )?;
    let ids: Vec<ParamId> = model.store().ids().collect();
    let shapes: Vec<&[usize]> = ids.iter().map(|&id| model.store().get(id).shape()).collect();
    let mut adam = AdamState::new(&shapes);
    let tc = TrainConfig {
        lr: w.lr,
        epochs: w.steps.div_ceil(data.samples().len().max(1)),
        seed: w.seed,
        variant: VariantSpec::none(),
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        max_steps: Some(w.steps),
        ..Default::default()
    };
    let samples = data.samples();
    run(&samples, &mut model, None, &ids, &mut adam, &tc, &opts, "")?;
    Ok(model)
}

/// A variant model initialised from `backbone`: every tensor the two share
/// is copied, and adapters keep their fresh (identity) initialisation.
pub fn from_backbone<T: Real>(backbone: &Model<T>, variant: VariantSpec, seed: u64) -> Result<Model<T>> {
    let mut m = Model::<T>::new(backbone.config(), variant, seed)?;
    m.transplant(backbone.store());
    Ok(m)
}
