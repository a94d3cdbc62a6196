use super::*;
use crate::diff::GradCheckOptions;
use crate::testutil::random_image;

fn tiny(precision: Precision) -> Model {
    Model::new(NetConfig::tiny(), precision).unwrap()
}

#[test]
fn pyramid_shapes_at_default_width() {
    let model = Model::new(NetConfig::default(), Precision::F32).unwrap();
    let py = model.encode(&random_image(1, 64, 64)).unwrap();
    let shapes: Vec<Vec<usize>> = py.levels.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![16, 64, 64], vec![32, 32, 32], vec![64, 16, 16], vec![128, 8, 8]]
    );
    assert_eq!(py.content_layer().shape(), &[128, 8, 8]);
}

#[test]
fn encode_is_deterministic_and_rejects_bad_sizes() {
    let model = tiny(Precision::F32);
    let img = random_image(2, 16, 24);
    assert_eq!(model.encode(&img).unwrap(), model.encode(&img).unwrap());
    assert!(model.encode(&random_image(2, 12, 16)).is_err());
}

/// Spatially constant activations propagate as `relu(sum_k(W) · v + b)`
/// through reflect-padded convolutions, strided or not.
#[test]
fn zero_image_matches_bias_propagation() {
    let model = tiny(Precision::F64);
    let py = model.encode(&ImageTensor::filled(3, 16, 16, 0.0)).unwrap();
    let layer = |name: &str, v: &[f64]| -> Vec<f64> {
        let w = model.params.get(&format!("{name}.w")).unwrap();
        let b = model.params.get(&format!("{name}.b")).unwrap();
        let [co, ci, k, _] = w.shape()[..] else { panic!() };
        (0..co)
            .map(|o| {
                let s: f64 = (0..ci)
                    .map(|i| {
                        let taps = &w.data()[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                        taps.iter().sum::<f64>() * v[i]
                    })
                    .sum();
                (s + b.data()[o]).max(0.0)
            })
            .collect()
    };
    let mut v = vec![0.0; 3];
    let mut expected = Vec::new();
    v = layer("enc.s1.c1", &v);
    v = layer("enc.s1.c2", &v);
    expected.push(v.clone());
    for s in 2..=4 {
        for part in ["down", "c1", "c2"] {
            v = layer(&format!("enc.s{s}.{part}"), &v);
        }
        expected.push(v.clone());
    }
    for (level, exp) in py.levels.iter().zip(&expected) {
        let hw = level.shape()[1] * level.shape()[2];
        assert_eq!(level.shape()[0], exp.len());
        for (c, &e) in exp.iter().enumerate() {
            for &got in &level.data()[c * hw..(c + 1) * hw] {
                assert!((got - e).abs() < 1e-9, "{got} vs {e}");
            }
        }
    }
    assert!(expected.iter().flatten().any(|&x| x > 0.0));
}

#[test]
fn transform_self_attention_is_finite() {
    let model = tiny(Precision::F32);
    let py = model.encode(&random_image(3, 32, 32)).unwrap();
    let f = model.transform(&py, &py).unwrap();
    assert_eq!(f.shape(), &[16, 4, 4]);
    assert!(f.all_finite());
}

fn conv1x1(model: &Model, name: &str, x: &[f64]) -> Vec<f64> {
    let w = model.params.get(&format!("{name}.w")).unwrap();
    let b = model.params.get(&format!("{name}.b")).unwrap();
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    (0..co)
        .map(|o| (0..ci).map(|i| w.data()[o * ci + i] * x[i]).sum::<f64>() + b.data()[o])
        .collect()
}

/// At one spatial position softmax is 1, so each block adds `o(v(S))`.
#[test]
fn single_position_attention_closed_form() {
    let mut model = tiny(Precision::F64);
    // Give every bias a value so the closed form is not trivially zero.
    for name in model.group_names(Group::Generator) {
        if name.starts_with("tf.") && name.ends_with(".b") {
            let t = model.params.get(&name).unwrap().map(|_| 0.05);
            model.params.set(&name, t).unwrap();
        }
    }
    let fc = model.encode(&random_image(4, 8, 8)).unwrap();
    let fs = model.encode(&random_image(5, 8, 8)).unwrap();
    let got = model.transform(&fc, &fs).unwrap();

    let pooled = |py: &FeaturePyramid| -> Vec<f64> {
        py.levels
            .iter()
            .flat_map(|t| {
                let hw = t.shape()[1] * t.shape()[2];
                t.data()
                    .chunks(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let mut f = conv1x1(&model, "tf.fuse", &pooled(&fc));
    let s = conv1x1(&model, "tf.fuse", &pooled(&fs));
    for b in 0..TRANSFORM_BLOCKS {
        let v = conv1x1(&model, &format!("tf.b{b}.v"), &s);
        let o = conv1x1(&model, &format!("tf.b{b}.o"), &v);
        for (x, y) in f.iter_mut().zip(&o) {
            *x += y;
        }
    }
    assert_eq!(got.shape(), &[16, 1, 1]);
    for (a, b) in got.data().iter().zip(&f) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn transform_rejects_mismatched_pyramids() {
    let a = tiny(Precision::F32);
    let b = Model::new(NetConfig { base_width: 3, ..NetConfig::tiny() }, Precision::F32).unwrap();
    let pa = a.encode(&random_image(1, 16, 16)).unwrap();
    let pb = b.encode(&random_image(1, 16, 16)).unwrap();
    assert!(a.transform(&pa, &pb).is_err());
}

#[test]
fn zero_final_layer_returns_prior_exactly() {
    let model = tiny(Precision::F32);
    let prior = random_image(6, 16, 16).scaled(0.5);
    let fused = model
        .transform(&model.encode(&prior).unwrap(), &model.encode(&random_image(7, 16, 16)).unwrap())
        .unwrap();
    let (delta, out) = model.decode_deltas(&fused, &prior).unwrap();
    assert!(delta.data().iter().all(|&d| d == 0.0));
    assert_eq!(out.data(), prior.data());
}

#[test]
fn saturated_delta_clamps_to_one() {
    let mut model = tiny(Precision::F64);
    model.params.set("dec.out.b", Tensor::full(&[3], 50.0)).unwrap();
    let prior = ImageTensor::filled(3, 16, 16, 0.8);
    let fused = Tensor::zeros(&[16, 2, 2]);
    let (delta, out) = model.decode_deltas(&fused, &prior).unwrap();
    assert!(delta.data().iter().all(|&d| d == 1.0));
    assert!(out.data().iter().all(|&v| v == 1.0));
    assert!(model.decode_deltas(&Tensor::zeros(&[16, 3, 2]), &prior).is_err());
}

fn grad_opts() -> GradCheckOptions {
    GradCheckOptions {
        abs_floor: 1e-6,
        ..GradCheckOptions::default()
    }
}

#[test]
fn decoder_gradients_pass_check() {
    let model = Model::new(
        NetConfig {
            zero_init_deltas: false,
            ..NetConfig::tiny()
        },
        Precision::F64,
    )
    .unwrap();
    let prior = random_image(8, 16, 16).scaled(0.5);
    let fused = Tensor::new(
        vec![16, 2, 2],
        random_image(9, 16, 8).data()[..64].iter().map(|v| v - 0.5).collect(),
    )
    .unwrap();
    let names = model.group_names(Group::Generator).into_iter().filter(|n| n.starts_with("dec.")).collect::<Vec<_>>();
    let report = grad_check_params(
        &model.params,
        &names,
        |ctx| {
            let f = ctx.tape.constant(fused.clone());
            let p = ctx.tape.constant(prior.to_tensor());
            let (_, out) = arch::decode_deltas(ctx, f, p)?;
            Ok(ctx.tape.sum(out))
        },
        1e-3,
        &grad_opts(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn domain_disc_shapes_and_gradients() {
    let model = tiny(Precision::F64);
    for size in [64, 128, 256] {
        let out = model.domain_disc(&random_image(size as u64, size, size)).unwrap();
        assert_eq!(out.shape(), &[1, size / 8, size / 8]);
    }
    let img = random_image(10, 64, 64);
    assert_eq!(model.domain_disc(&img).unwrap(), model.domain_disc(&img).unwrap());
    let names = model.group_names(Group::Discriminator).into_iter().filter(|n| n.starts_with("dd.")).collect::<Vec<_>>();
    let report = grad_check_params(
        &model.params,
        &names,
        |ctx| {
            let x = ctx.tape.constant(img.to_tensor());
            let logits = arch::domain_disc(ctx, &model.config, x)?;
            let m = ctx.tape.mean(logits);
            let neg = ctx.tape.scale(m, -1.0);
            Ok(ctx.tape.softplus(neg))
        },
        1e-3,
        &grad_opts(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn patch_disc_is_symmetric_in_refs() {
    let model = tiny(Precision::F64);
    let cand = random_image(11, 16, 16);
    let refs: Vec<_> = (0..4).map(|i| random_image(20 + i, 16, 16)).collect();
    let a = model.patch_disc(PatchKind::Simple, &cand, &refs).unwrap();
    let mut rev = refs.clone();
    rev.reverse();
    let b = model.patch_disc(PatchKind::Simple, &cand, &rev).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(model.patch_disc(PatchKind::Complex, &cand, std::slice::from_ref(&cand)).unwrap().is_finite());
    assert!(model.patch_disc(PatchKind::Complex, &cand, &[]).is_err());
    // The two discriminators have independent parameters.
    assert_ne!(a, model.patch_disc(PatchKind::Complex, &cand, &refs).unwrap());
}

#[test]
fn patch_disc_gradients_pass_check() {
    let model = tiny(Precision::F64);
    let cand = random_image(12, 8, 8);
    let refs: Vec<_> = (0..3).map(|i| random_image(30 + i, 8, 8)).collect();
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("pds.")).map(str::to_string).collect();
    let report = grad_check_params(
        &model.params,
        &names,
        |ctx| {
            let c = ctx.tape.constant(cand.to_tensor());
            let rs: Vec<_> = refs.iter().map(|r| ctx.tape.constant(r.to_tensor())).collect();
            arch::patch_disc(ctx, &model.config, PatchKind::Simple, c, &rs)
        },
        1e-3,
        &grad_opts(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn codes_are_unit_norm_and_deterministic() {
    let model = tiny(Precision::F32);
    let img = random_image(13, 16, 16);
    let py = model.encode(&img).unwrap();
    for code in [model.project_style(&py).unwrap(), model.project_content(&py).unwrap()] {
        assert_eq!(code.len(), 4);
        let n: f64 = code.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let py2 = model.encode(&img).unwrap();
    assert_eq!(model.project_style(&py).unwrap(), model.project_style(&py2).unwrap());
}

#[test]
fn content_head_matches_matrix_oracle() {
    let model = Model::new(NetConfig { base_width: 1, ..NetConfig::tiny() }, Precision::F64).unwrap();
    let py = model.encode(&random_image(14, 16, 16)).unwrap();
    let l4 = py.content_layer();
    let hw = l4.shape()[1] * l4.shape()[2];
    let x: Vec<f64> = l4.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    let dense = |x: &[f64], name: &str| -> Vec<f64> {
        let w = model.params.get(&format!("{name}.w")).unwrap();
        let b = model.params.get(&format!("{name}.b")).unwrap();
        let (i, o) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|j| (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>() + b.data()[j])
            .collect()
    };
    let h: Vec<f64> = dense(&x, "lc.fc1").into_iter().map(|v| v.max(0.0)).collect();
    let o = dense(&h, "lc.fc2");
    let n = o.iter().map(|v| v * v).sum::<f64>().sqrt();
    let got = model.project_content(&py).unwrap();
    for (a, b) in got.iter().zip(&o) {
        assert!((a - b / n).abs() < 1e-12);
    }
}

#[test]
fn model_checkpoint_round_trip_and_strictness() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.neat");
    let model = tiny(Precision::F32);
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);

    let mut c = model.to_container();
    c.entries.retain(|e| e.name != "dec.c2.w");
    let err = Model::from_container(&c).unwrap_err().to_string();
    assert!(err.contains("dec.c2.w"), "{err}");

    let mut c = model.to_container();
    c.push("opt.gen.t", DType::F64, Tensor::scalar(3.0));
    assert!(Model::from_container(&c).is_ok());
    c.push("extra.w", DType::F64, Tensor::scalar(3.0));
    assert!(Model::from_container(&c).is_err());
}

#[test]
fn encoder_weights_load_from_container() {
    let mut a = tiny(Precision::F32);
    let b = Model::new(NetConfig { seed: 9, ..NetConfig::tiny() }, Precision::F32).unwrap();
    let mut c = Container::default();
    for name in b.group_names(Group::Encoder) {
        c.push(name.clone(), DType::F32, b.params.get(&name).unwrap().clone());
    }
    a.load_encoder(&c).unwrap();
    let img = random_image(1, 16, 16);
    assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
    assert_ne!(a.params.get("dec.c1.w").unwrap(), b.params.get("dec.c1.w").unwrap());
}

#[test]
fn groups_partition_parameters() {
    let m = tiny(Precision::F32);
    let total: usize = [Group::Encoder, Group::Generator, Group::Discriminator]
        .iter()
        .map(|&g| m.group_names(g).len())
        .sum();
    assert_eq!(total, m.params.len());
    assert_eq!(group_of("pdc.fc1.w"), Group::Discriminator);
    assert_eq!(group_of("ls.fc1.w"), Group::Generator);
}
