//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test --test acceptance -- 1 4 10`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptx_core::autodiff::Tape;
use ptx_core::cli;
use ptx_core::eval::{category_tests, iou, mae, run_table1, Benchmark, Prepared, StudyOutcome};
use ptx_core::exec::Exec;
use ptx_core::model::{load_checkpoint, Model, ModelConfig, VariantSpec};
use ptx_core::scenes::{generate_dataset, Dataset, SceneSpec};
use ptx_core::tensor::Tensor;
use ptx_core::textbank::TextBank;
use ptx_core::trainer::{
    from_backbone, load_training_state, resume, train, warmup_backbone, TrainConfig, TrainOptions, WarmupConfig,
};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn samples(n: usize, seed: u64, image_size: usize) -> Dataset {
    let spec = SceneSpec {
        image_size,
        ..SceneSpec::default()
    };
    let mut d = generate_dataset(&spec, seed, n, Exec::Parallel).unwrap();
    for r in &mut d.records {
        r.samples.truncate(1);
    }
    d
}

fn gradient_integrity() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let v = VariantSpec::parallel_text();
    let t = Instant::now();
    let out = cli::gradcheck(&cfg, v, 32, 0).map_err(e2s)?;
    let took = t.elapsed();
    let model = Model::<f32>::new(&cfg, v, 0).map_err(e2s)?;
    let ids = model.trainable_ids();
    ensure(out.params.len() == ids.len(), "not every trainable tensor was checked")?;
    for (p, id) in out.params.iter().zip(&ids) {
        let numel = model.store().get(*id).len();
        ensure(
            p.coords >= numel.min(32),
            format!("{} checked at only {} coordinates", p.name, p.coords),
        )?;
    }
    ensure(out.worst <= 1e-4, format!("worst relative error {:.3e}", out.worst))?;
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!(
        "worst rel err {:.2e} over {} tensors in {:.1}s",
        out.worst,
        out.params.len(),
        took.as_secs_f64()
    ))
}

fn identity_at_init() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let backbone = Model::<f64>::new(&cfg, VariantSpec::none(), 11).map_err(e2s)?;
    let data = samples(10, 500, cfg.image_size);
    let bank = TextBank::build_synthetic(&data.spec.classes, cfg.text_dim, 0).map_err(e2s)?;
    let mut worst = 0.0f64;
    for v in [
        VariantSpec::decoder_only(),
        VariantSpec::parallel(),
        VariantSpec::parallel_text(),
        VariantSpec::text_mlp_mhsa(),
    ] {
        let m = from_backbone(&backbone, v, 3).map_err(e2s)?;
        for s in data.samples() {
            let base = backbone.predict(&s.scene.image, &s.sample.points, None).map_err(e2s)?;
            let t = v.uses_text().then(|| bank.lookup(&s.sample.class).unwrap());
            let out = m.predict(&s.scene.image, &s.sample.points, t).map_err(e2s)?;
            worst = worst.max(out.max_abs_diff(&base));
        }
    }
    ensure(worst <= 1e-10, format!("max logit change {worst:.3e}"))?;
    Ok(format!("max logit change {worst:.1e} on 10 samples x 4 variants"))
}

/// One full-budget variant comparison shared by the criteria that need it.
struct Table1 {
    prep: Prepared,
    outcome: StudyOutcome,
    took: Duration,
}

fn table1() -> &'static Result<Table1, String> {
    static T: OnceLock<Result<Table1, String>> = OnceLock::new();
    T.get_or_init(|| {
        let t = Instant::now();
        let prep = Prepared::new(&Benchmark::default(), Exec::Parallel).map_err(e2s)?;
        let outcome = run_table1(&prep, &[0, 1, 2], Exec::Parallel, None).map_err(e2s)?;
        print!("{}", outcome.report.to_text());
        Ok(Table1 {
            prep,
            outcome,
            took: t.elapsed(),
        })
    })
}

fn frozen_invariance() -> Result<String, String> {
    let t1 = table1().as_ref().map_err(Clone::clone)?;
    let bank = &t1.prep.bank;
    let fresh = TextBank::build_synthetic(bank.class_names(), bank.dim(), t1.prep.bench.bank_seed).map_err(e2s)?;
    ensure(fresh.embeddings() == bank.embeddings(), "text bank changed")?;
    let mut runs = 0;
    for (row, (models, hashes)) in t1.outcome.models.iter().zip(&t1.outcome.runs).enumerate() {
        for (m, h) in models.iter().zip(hashes) {
            let (m, (before, after)) = (m.as_ref().ok_or("a run failed")?, h.as_ref().ok_or("a run failed")?);
            ensure(before == after, format!("row {row}: frozen hash changed"))?;
            for (name, t) in m.store().iter() {
                if m.is_trainable(name) {
                    continue;
                }
                let orig = t1.prep.backbone.store().by_name(name);
                ensure(
                    orig.is_some_and(|o| o.data() == t.data()),
                    format!("frozen tensor {name} changed"),
                )?;
            }
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} runs of {} epochs, frozen hashes and tensors unchanged",
        t1.prep.bench.epochs
    ))
}

/// Trainable count from the configuration alone: encoder adapters plus
/// the decoder's two attention layers, norms and mask token.
fn expected_counts(c: &ModelConfig) -> (usize, usize) {
    let (d, r, dt, dd, a) = (c.embed_dim, c.bottleneck, c.text_dim, c.decoder_dim, c.decoder_attn_dim);
    let linear = |i: usize, o: usize| i * o + o;
    let attn = 3 * linear(dd, a) + linear(a, dd);
    let decoder = dd + 2 * (attn + 2 * dd);
    let adapters = c.depth * (2 * d * r + dt * d + 2 * d * r);
    let block = 2 * 2 * d + 4 * linear(d, d) + linear(d, c.mlp_ratio * d) + linear(c.mlp_ratio * d, d);
    let frozen = linear(c.patch_dim(), d) + c.tokens() * d + c.depth * block + linear(d, dd) + 2 * dd + dd;
    (adapters + decoder, frozen)
}

fn parameter_efficiency() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let p = cli::params(&cfg, VariantSpec::parallel_text()).map_err(e2s)?;
    let (trainable, frozen) = expected_counts(&cfg);
    ensure(
        (p.trainable, p.frozen) == (trainable, frozen),
        format!("counts {}/{} differ from {trainable}/{frozen}", p.trainable, p.frozen),
    )?;
    ensure(p.fraction < 0.10, format!("trainable fraction {:.4}", p.fraction))?;
    Ok(format!(
        "{} / {} trainable = {:.2}%",
        p.trainable,
        p.total,
        100.0 * p.fraction
    ))
}

fn text_null() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let mut m = cli::gradcheck_model(&cfg, VariantSpec::parallel_text(), 4).map_err(e2s)?;
    let data = samples(10, 700, cfg.image_size);
    let bank = TextBank::build_synthetic(&data.spec.classes, cfg.text_dim, 0).map_err(e2s)?;
    let zero = vec![0.0f32; cfg.text_dim];
    let mut reference = Vec::new();
    for s in data.samples() {
        let free = m.predict_text_free(&s.scene.image, &s.sample.points).map_err(e2s)?;
        let with_zero = m.predict(&s.scene.image, &s.sample.points, Some(&zero)).map_err(e2s)?;
        ensure(
            with_zero == free,
            "zero embedding differs from the plain-bottleneck forward",
        )?;
        let with_class = m.predict(
            &s.scene.image,
            &s.sample.points,
            Some(bank.lookup(&s.sample.class).unwrap()),
        );
        ensure(
            with_class.map_err(e2s)? != free,
            "text has no effect before zeroing W_t",
        )?;
        reference.push(free);
    }
    for id in m.trainable_ids() {
        if m.store().name(id).ends_with(".w_t") {
            m.store_mut().get_mut(id).data_mut().fill(0.0);
        }
    }
    for (s, free) in data.samples().iter().zip(&reference) {
        let t = bank.lookup(&s.sample.class).unwrap();
        let out = m.predict(&s.scene.image, &s.sample.points, Some(t)).map_err(e2s)?;
        ensure(&out == free, "zero W_t differs from the plain-bottleneck forward")?;
    }
    Ok("zero embedding and zero W_t both match the plain forward bit for bit on 10 samples".into())
}

fn metric_oracles() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for k in 0..1000 {
        let side = r.gen_range(1..=12);
        let n = side * side;
        let density = r.gen_range(0.0..1.0);
        let bits =
            |r: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| (r.gen::<f64>() < density) as u8 as f32).collect() };
        let (a, b) = (bits(&mut r), bits(&mut r));
        let prob: Vec<f32> = (0..n).map(|_| r.gen_range(0.0f32..=1.0)).collect();
        let (mut inter, mut union, mut abs) = (0usize, 0usize, 0.0f64);
        for i in 0..n {
            let (x, y) = (a[i] == 1.0, b[i] == 1.0);
            inter += (x && y) as usize;
            union += (x || y) as usize;
            abs += (prob[i] as f64 - b[i] as f64).abs();
        }
        let want_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let ta = Tensor::new(&[side, side], a).unwrap();
        let tb = Tensor::new(&[side, side], b).unwrap();
        let tp = Tensor::new(&[side, side], prob).unwrap();
        ensure(
            iou(&ta, &tb).map_err(e2s)? == want_iou,
            format!("iou mismatch on pair {k}"),
        )?;
        ensure(
            mae(&tp, &tb).map_err(e2s)? == abs / n as f64,
            format!("mae mismatch on pair {k}"),
        )?;
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let l = tape.bce_with_logits(z, &Tensor::scalar(1.0)).map_err(e2s)?;
    let bce = tape.value(l).data()[0];
    let err = (bce - std::f64::consts::LN_2).abs();
    ensure(err <= 1e-9, format!("BCE(0, 1) = {bce}"))?;
    Ok(format!("1000 mask pairs match exactly; |BCE(0,1) - ln 2| = {err:.1e}"))
}

fn table1_direction() -> Result<String, String> {
    let t1 = table1().as_ref().map_err(Clone::clone)?;
    let r = &t1.outcome.report;
    let row = |l: &str| r.row(l).ok_or(format!("missing row {l}"));
    let (p, pt) = (row("parallel")?, row("parallel_text")?);
    ensure(r.rows.iter().all(|x| x.failed.is_empty()), "a training run failed")?;
    let margin = pt.miou - p.miou;
    let detail = format!(
        "parallel_text {:.2} vs parallel {:.2} mIoU, margin {margin:+.2} (3 seeds), {:.0}s",
        pt.miou,
        p.miou,
        t1.took.as_secs_f64()
    );
    ensure(margin >= 5.0, format!("margin below 5 points: {detail}"))?;
    ensure(t1.took < Duration::from_secs(7200), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn category4() -> Result<String, String> {
    let t1 = table1().as_ref().map_err(Clone::clone)?;
    let m = &t1.outcome.models;
    let take = |row: usize| -> Result<Vec<&Model<f32>>, String> {
        m[row]
            .iter()
            .map(|x| x.as_ref().ok_or_else(|| "a run failed".to_string()))
            .collect()
    };
    let (base, text) = (take(2)?, take(3)?);
    let rep = category_tests(&base, &text, &t1.prep.test, &t1.prep.bank, 0.5, Exec::Parallel).map_err(e2s)?;
    print!("{}", rep.to_text());
    let c4 = rep.rows.iter().find(|r| r.category == "cat4").ok_or("no cat4 row")?;
    ensure(
        (0.0..=1.0).contains(&c4.baseline) && (0.0..=1.0).contains(&c4.text),
        "recall outside [0, 1]",
    )?;
    let detail = format!(
        "unprompted recall {:.3} (text) vs {:.3} (parallel)",
        c4.text, c4.baseline
    );
    ensure(c4.pass, detail.clone())?;
    Ok(detail)
}

fn ablation_harness() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut lines = Vec::new();
    for (study, labels) in [
        ("injection", &["prompt_encoder", "image_encoder", "mask_decoder"][..]),
        ("placement", &["mlp_only", "mlp_and_mhsa"][..]),
    ] {
        let mut bodies = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{study}{rep}"));
            let code = cli::run(["ptx", "ablate", study, "--quick", "--out", out.to_str().unwrap()]);
            ensure(code == 0, format!("ablate {study} exited {code}"))?;
            let read = |f: &str| fs::read(out.join(f)).map_err(e2s);
            bodies.push((read("report.json")?, read("report.txt")?));
        }
        ensure(bodies[0] == bodies[1], format!("{study} reports differ between reruns"))?;
        let v: serde_json::Value = serde_json::from_slice(&bodies[0].0).map_err(e2s)?;
        let rows = v["rows"].as_array().ok_or("no rows")?;
        let got: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
        ensure(got == labels, format!("{study} rows {got:?}"))?;
        ensure(
            rows.iter().all(|r| r["seeds"] == rows[0]["seeds"]),
            "seed sets differ between rows",
        )?;
        ensure(
            v["budget"].is_object() && v["reference"].as_array().is_some_and(|r| !r.is_empty()),
            "missing budget or reference",
        )?;
        lines.push(format!("{study}: {} rows, winner {}", rows.len(), v["winner"]));
    }
    Ok(format!("{}; reruns byte-identical", lines.join("; ")))
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_resume() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let w = WarmupConfig {
        steps: 60,
        scenes: 16,
        ..WarmupConfig::default()
    };
    let backbone = warmup_backbone::<f32>(&cfg, &w).map_err(e2s)?;
    let data = generate_dataset(&SceneSpec::default(), 300, 10, Exec::Parallel).map_err(e2s)?;
    let bank = TextBank::build_synthetic(&data.spec.classes, cfg.text_dim, 0).map_err(e2s)?;
    let v = VariantSpec::parallel_text();
    let tc = TrainConfig {
        variant: v,
        seed: 7,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(e2s)?;
    let opts = |name: &str, steps: usize| TrainOptions {
        out_dir: Some(dir.path().join(name)),
        max_steps: Some(steps),
        log_every: 0,
    };
    let fresh = |name: &str, steps: usize| -> Result<Model<f32>, String> {
        let mut m = from_backbone(&backbone, v, tc.seed).map_err(e2s)?;
        train(&data, &mut m, Some(&bank), &tc, &opts(name, steps)).map_err(e2s)?;
        Ok(m)
    };
    let straight = fresh("straight", 60)?;
    fresh("again", 60)?;
    fresh("first", 50)?;
    let ck = dir.path().join("first/checkpoint");
    ensure(
        load_training_state::<f32>(&ck).map_err(e2s)?.adam.step == 50,
        "checkpoint not at step 50",
    )?;
    let (resumed, _) = resume::<f32>(&ck, &data, Some(&bank), &tc, &opts("second", 60)).map_err(e2s)?;

    for (name, t) in straight.store().iter() {
        let r = resumed
            .store()
            .by_name(name)
            .ok_or(format!("{name} missing after resume"))?;
        let same = t.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{name} differs between resumed and straight runs"))?;
    }
    let disk = load_checkpoint::<f32>(&dir.path().join("second/checkpoint")).map_err(e2s)?;
    ensure(
        tree(&dir.path().join("straight/checkpoint")) == tree(&dir.path().join("second/checkpoint")),
        "checkpoint files differ",
    )?;
    ensure(
        disk.model.store().len() == straight.store().len(),
        "checkpoint tensor count",
    )?;

    let csv = |n: &str| fs::read_to_string(dir.path().join(n).join("loss.csv")).unwrap();
    ensure(
        csv("straight") == csv("again"),
        "identical seeds gave different loss curves",
    )?;
    let rows = |s: String| s.lines().skip(1).map(String::from).collect::<Vec<_>>();
    let (full, head, tail) = (rows(csv("straight")), rows(csv("first")), rows(csv("second")));
    ensure(
        full[..50] == head[..] && full[50..] == tail[..],
        "resumed loss curve differs",
    )?;
    Ok("resume at 50 to 60 matches the straight run bitwise; reruns give identical loss.csv".into())
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Check); 10] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "identity at init", identity_at_init),
        (3, "frozen invariance", frozen_invariance),
        (4, "parameter efficiency", parameter_efficiency),
        (5, "text-null equivalence", text_null),
        (6, "metric oracles", metric_oracles),
        (7, "variant comparison direction", table1_direction),
        (8, "unprompted-instance recall", category4),
        (9, "ablation harness", ablation_harness),
        (10, "determinism and resume", determinism_and_resume),
    ];
    let mut results = Vec::new();
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match &r {
            Ok(d) => format!("criterion {n:>2} PASS  {name}: {d}"),
            Err(e) => format!("criterion {n:>2} FAIL  {name}: {e}"),
        };
        println!("{line}  [{:.1}s]", t.elapsed().as_secs_f64());
        results.push((n, name, r.is_ok()));
    }
    println!();
    for (n, name, ok) in &results {
        println!("criterion {n:>2} {}  {name}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
