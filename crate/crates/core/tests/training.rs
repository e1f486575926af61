use ptx_core::eval::evaluate;
use ptx_core::exec::Exec;
use ptx_core::model::ModelConfig;
use ptx_core::model::VariantSpec;
use ptx_core::scenes::{generate_dataset, read_dataset, write_dataset, Dataset, PromptMode, SceneSpec};
use ptx_core::textbank::TextBank;
use ptx_core::trainer::{from_backbone, resume, train, warmup_backbone, TrainConfig, TrainOptions, WarmupConfig};

fn one_sample() -> Dataset {
    let spec = SceneSpec {
        classes: vec!["disk".into(), "square".into()],
        classes_per_scene: Some(1),
        instances_per_class: [1, 1],
        samples_per_scene: Some(1),
        ..SceneSpec::default()
    };
    let d = generate_dataset(&spec, 5, 1, Exec::Sequential).unwrap();
    assert_eq!(d.samples().len(), 1);
    d
}

#[test]
fn single_sample_overfits() {
    let cfg = ModelConfig::default();
    let w = WarmupConfig {
        steps: 100,
        scenes: 16,
        ..WarmupConfig::default()
    };
    let backbone = warmup_backbone::<f32>(&cfg, &w).unwrap();
    let data = one_sample();
    let bank = TextBank::build_synthetic(&data.spec.classes, cfg.text_dim, 0).unwrap();
    let v = VariantSpec::parallel_text();
    let mut model = from_backbone(&backbone, v, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 500,
        variant: v,
        ..TrainConfig::default()
    };
    let out = train(&data, &mut model, Some(&bank), &tc, &TrainOptions::default()).unwrap();
    let (first, last) = (out.losses[0].1, out.losses[out.losses.len() - 1].1);
    assert!(last < 0.05 * first, "loss {first} -> {last}");
    let m = evaluate(&model, &data, Some(&bank), 0.5, None, Exec::Sequential).unwrap();
    assert!(m.ious[0] > 0.9, "{:?}", m.ious);
}

#[test]
fn evaluation_survives_dataset_round_trip() {
    let spec = SceneSpec {
        prompt_modes: PromptMode::ALL.to_vec(),
        ..SceneSpec::default()
    };
    let data = generate_dataset(&spec, 40, 4, Exec::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    let cfg = ModelConfig::default();
    let bank = TextBank::build_synthetic(&spec.classes, cfg.text_dim, 0).unwrap();
    let model = ptx_core::model::Model::<f32>::new(&cfg, VariantSpec::parallel_text(), 3).unwrap();
    let a = evaluate(&model, &data, Some(&bank), 0.5, None, Exec::Parallel).unwrap();
    let b = evaluate(&model, &back, Some(&bank), 0.5, None, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_rejects_a_different_variant() {
    let cfg = ModelConfig::default();
    let data = one_sample();
    let bank = TextBank::build_synthetic(&data.spec.classes, cfg.text_dim, 0).unwrap();
    let v = VariantSpec::parallel();
    let mut model = ptx_core::model::Model::<f32>::new(&cfg, v, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        variant: v,
        epochs: 3,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    train(&data, &mut model, None, &tc, &opts).unwrap();
    let other = TrainConfig {
        variant: VariantSpec::parallel_text(),
        ..tc.clone()
    };
    let Err(err) = resume::<f32>(
        &dir.path().join("checkpoint"),
        &data,
        Some(&bank),
        &other,
        &TrainOptions::default(),
    ) else {
        panic!("variant mismatch must be rejected");
    };
    assert!(err.to_string().contains("variant"), "{err}");
    let (_, out) = resume::<f32>(
        &dir.path().join("checkpoint"),
        &data,
        None,
        &TrainConfig { epochs: 4, ..tc },
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.steps, 4);
}
