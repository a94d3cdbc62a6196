use std::collections::BTreeMap;

use super::*;
use crate::diff::Tensor;
use crate::imgproc::save_image;
use crate::nets::{Group, Precision};
use crate::testutil::random_image;
use crate::ImageTensor;

fn tiny_settings(subbatch: Option<usize>) -> StepSettings {
    StepSettings {
        patch: PatchSettings { count: 4, size: 8 },
        subbatch,
        ..StepSettings::default()
    }
}

fn tiny_model(precision: Precision) -> Model {
    let cfg = NetConfig {
        zero_init_deltas: false,
        ..NetConfig::tiny()
    };
    Model::new(cfg, precision).unwrap()
}

fn tiny_batch(seed: u64, n_c: usize, n_s: usize) -> Batch {
    let img = |k: u64| random_image(seed * 100 + k, 16, 16);
    Batch::new(
        (0..n_c as u64).map(img).collect(),
        (10..10 + n_s as u64).map(img).collect(),
        (20..20 + n_s as u64).map(img).collect(),
        seed,
    )
    .unwrap()
}

fn max_rel_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let mut worst: f64 = 0.0;
    for (name, x) in a {
        let y = &b[name];
        let scale = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(x.max_abs_diff(y) / scale);
    }
    worst
}

#[test]
fn config_parses_and_rejects_unknown_keys() {
    let text = "content_manifest = c.txt\nstyle_manifest = s.txt # comment\ncrop_size = 64\nbatch = 4\n\
                lambda.patch_complex = 0.5\nblur_kernel = 9\nprecision = f64\n";
    let cfg = TrainConfig::parse(text, Path::new("/data")).unwrap();
    assert_eq!(cfg.content_manifest, PathBuf::from("/data/c.txt"));
    assert_eq!(cfg.crop_size, 64);
    assert_eq!(cfg.weights.lambda[7], 0.5);
    assert_eq!(cfg.prior.blur_sigma, PriorConfig::sigma_for_kernel(9));
    assert_eq!(cfg.precision, Precision::F64);

    let err = TrainConfig::parse("bogus = 1\n", Path::new(".")).unwrap_err().to_string();
    assert!(err.contains("bogus") && err.contains("line 1"), "{err}");
    for bad in ["crop_size = 60", "batch = 1", "batch = 4\naccumulation_subbatch = 3", "lambda.style = -1"] {
        assert!(TrainConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
    }
}

#[test]
fn config_text_round_trips() {
    let cfg = TrainConfig {
        content_manifest: "/a/c.txt".into(),
        style_manifest: "/a/s.txt".into(),
        out_dir: "/a/run".into(),
        accumulation_subbatch: Some(2),
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::parse(&cfg.to_text(), Path::new("/")).unwrap(), cfg);
}

#[test]
fn manifests_reject_empty_lists_and_bad_files() {
    assert!(matches!(
        Manifest::parse("\n# nothing\n", Path::new(".")),
        Err(NeatError::Data { .. })
    ));
    let m = Manifest::parse("missing.png\n", Path::new("/nonexistent")).unwrap();
    let err = m.load_images().unwrap_err();
    assert!(err.to_string().contains("missing.png"));
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let pool: Vec<ImageTensor> = (0..3).map(|s| random_image(s, 20, 12)).collect();
    let a = sample_batch(&pool, &pool, 4, 16, 7, 3).unwrap();
    let b = sample_batch(&pool, &pool, 4, 16, 7, 3).unwrap();
    let c = sample_batch(&pool, &pool, 4, 16, 7, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!((a.contents.len(), a.styles.len()), (2, 2));
    assert_eq!((a.contents[0].height(), a.contents[0].width()), (16, 16));
    assert_eq!(grid_shape(3), (1, 3));
}

#[test]
fn step_is_deterministic() {
    let model = tiny_model(Precision::F64);
    let batch = tiny_batch(1, 2, 2);
    let a = compute_step(&model, &batch, &tiny_settings(None)).unwrap();
    let b = compute_step(&model, &batch, &tiny_settings(None)).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.generator, b.generator);
    assert!(a.report.terms.iter().all(|t| t.is_finite() && *t >= 0.0));
    let expected: f64 = a.report.terms.iter().zip(&LossWeights::default().lambda).map(|(t, l)| t * l).sum();
    assert!((a.report.total - expected).abs() <= 1e-12 * expected.abs());
}

#[test]
fn accumulated_step_matches_direct() {
    let model = tiny_model(Precision::F64);
    let batch = tiny_batch(2, 2, 2);
    let direct = compute_step(&model, &batch, &tiny_settings(None)).unwrap();
    for sub in [1, 2] {
        let acc = compute_step(&model, &batch, &tiny_settings(Some(sub))).unwrap();
        for (a, b) in acc.report.terms.iter().zip(&direct.report.terms) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        assert!(max_rel_diff(&acc.generator, &direct.generator) < 1e-8, "sub {sub}");
        assert!(max_rel_diff(&acc.discriminator, &direct.discriminator) < 1e-8, "sub {sub}");
    }
    assert!(compute_step(&model, &batch, &tiny_settings(Some(3))).is_err());
}

#[test]
fn gradients_are_split_by_group() {
    let model = tiny_model(Precision::F64);
    let out = compute_step(&model, &tiny_batch(3, 2, 2), &tiny_settings(None)).unwrap();
    assert!(out.generator.keys().all(|n| crate::nets::group_of(n) == Group::Generator));
    assert!(out.discriminator.keys().all(|n| crate::nets::group_of(n) == Group::Discriminator));
    assert!(out.generator.contains_key("ls.fc1.w") && out.generator.contains_key("tf.fuse.w"));
    assert!(out.discriminator.contains_key("pdc.fc2.w") && out.discriminator.contains_key("dd.out.w"));
}

#[test]
fn update_modes_isolate_parameter_groups() {
    let batch = tiny_batch(4, 2, 2);
    let mut t = Trainer::new(tiny_model(Precision::F32), tiny_settings(None), 1e-3);
    let before = t.model.clone();
    t.train_step(&batch, UpdateMode::DiscriminatorOnly).unwrap();
    for name in before.group_names(Group::Generator).iter().chain(&before.group_names(Group::Encoder)) {
        assert_eq!(t.model.params.get(name).unwrap(), before.params.get(name).unwrap(), "{name}");
    }
    assert_ne!(t.model.params.get("dd.c1.w").unwrap(), before.params.get("dd.c1.w").unwrap());

    let mid = t.model.clone();
    let r = t.train_step(&batch, UpdateMode::Both).unwrap();
    assert_eq!(r.step, 2);
    for name in mid.group_names(Group::Encoder) {
        assert_eq!(t.model.params.get(&name).unwrap(), mid.params.get(&name).unwrap());
    }
    assert_ne!(t.model.params.get("dec.c1.w").unwrap(), mid.params.get("dec.c1.w").unwrap());
}

#[test]
fn non_finite_step_leaves_state_untouched() {
    let mut model = tiny_model(Precision::F64);
    let mut w = model.params.get("dec.c1.w").unwrap().clone();
    w.data_mut()[0] = f64::NAN;
    model.params.set("dec.c1.w", w).unwrap();
    let mut t = Trainer::new(model, tiny_settings(None), 1e-3);
    let before = t.model.clone();
    let err = t.train_step(&tiny_batch(5, 2, 2), UpdateMode::Both).unwrap_err();
    assert!(matches!(err, NeatError::NonFinite(_)), "{err}");
    assert_eq!(t.step(), 0);
    assert!(t.model.params.iter().zip(before.params.iter()).all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
}

#[test]
fn contrastive_accumulation_matches_direct_and_checks_divisibility() {
    let model = tiny_model(Precision::F64);
    let images: Vec<ImageTensor> = (0..8).map(|s| random_image(s, 16, 16)).collect();
    let groups = [0, 0, 1, 1, 2, 2, 3, 3];
    for head in [CodeHead::Style, CodeHead::Content] {
        let direct = contrastive_direct(&model, &images, &groups, head, 0.2, 11).unwrap();
        for sub in [1, 2, 4, 8] {
            let acc = logit_accumulated_contrastive(&model, &images, &groups, head, 8, sub, 0.2, 11).unwrap();
            assert!((acc.loss - direct.loss).abs() < 1e-12);
            assert!(max_rel_diff(&acc.grads, &direct.grads) < 1e-9);
        }
    }
    assert!(logit_accumulated_contrastive(&model, &images, &groups, CodeHead::Style, 8, 3, 0.2, 0).is_err());
}

#[test]
fn checkpoint_keeps_optimizer_state() {
    let mut t = Trainer::new(tiny_model(Precision::F32), tiny_settings(None), 1e-3);
    t.train_step(&tiny_batch(6, 2, 2), UpdateMode::Both).unwrap();
    let c = t.to_container();
    assert!(c.get("opt.gen.m.dec.c1.w").is_some() && c.get("opt.disc.v.dd.c1.w").is_some());
    let back = Trainer::from_container(&c, tiny_settings(None), 1e-3).unwrap();
    assert_eq!(back.step(), 1);
    assert_eq!(back.gen_opt, t.gen_opt);
    assert_eq!(back.disc_opt, t.disc_opt);
    assert_eq!(back.model, t.model);
    assert!(Trainer::from_container(&t.model.to_container(), tiny_settings(None), 1e-3).is_err());
}

fn write_dataset(dir: &Path) -> TrainConfig {
    for (prefix, base) in [("c", 0u64), ("s", 50)] {
        let mut list = String::new();
        for k in 0..2 {
            let name = format!("{prefix}{k}.png");
            save_image(&random_image(base + k, 20, 20), &dir.join(&name)).unwrap();
            list.push_str(&name);
            list.push('\n');
        }
        std::fs::write(dir.join(format!("{prefix}.txt")), list).unwrap();
    }
    TrainConfig {
        content_manifest: dir.join("c.txt"),
        style_manifest: dir.join("s.txt"),
        out_dir: dir.join("run"),
        crop_size: 16,
        batch: 4,
        steps: 3,
        checkpoint_every: 2,
        patch: PatchSettings { count: 4, size: 8 },
        net: NetConfig::tiny(),
        ..TrainConfig::default()
    }
}

#[test]
fn fit_writes_outputs_and_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_dataset(dir.path());
    let full = fit(&cfg).unwrap();
    assert_eq!(full.steps_run, 3);
    let csv = std::fs::read_to_string(&full.loss_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let ckpt = cfg.out_dir.join("ckpt_000002.neat");
    assert!(ckpt.is_file());
    let uninterrupted = std::fs::read(&full.final_checkpoint).unwrap();

    let resumed_cfg = TrainConfig {
        out_dir: dir.path().join("resumed"),
        resume: Some(ckpt),
        ..cfg.clone()
    };
    let resumed = fit(&resumed_cfg).unwrap();
    assert_eq!(resumed.steps_run, 1);
    assert_eq!(std::fs::read(&resumed.final_checkpoint).unwrap(), uninterrupted);
    let last_full = csv.lines().last().unwrap();
    let resumed_csv = std::fs::read_to_string(&resumed.loss_csv).unwrap();
    assert_eq!(resumed_csv.lines().last().unwrap(), last_full);
}

#[test]
fn fit_rejects_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_dataset(dir.path());
    std::fs::write(&cfg.style_manifest, "\n").unwrap();
    assert!(matches!(fit(&cfg), Err(NeatError::Data { .. })));
    let missing = TrainConfig {
        content_manifest: dir.path().join("nope.txt"),
        ..cfg
    };
    assert!(matches!(fit(&missing), Err(NeatError::Data { .. })));
}
