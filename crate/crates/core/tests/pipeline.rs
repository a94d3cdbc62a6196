use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neat_core::imgproc::{load_image, save_image, PriorConfig};
use neat_core::infer::{stylize, StylizeOptions};
use neat_core::nets::{Model, NetConfig, Precision};
use neat_core::train::{fit, TrainConfig};
use neat_core::{ImageTensor, NeatError};

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

fn small_opts() -> StylizeOptions {
    StylizeOptions {
        prior: PriorConfig {
            bilateral_diameter: 5,
            ..PriorConfig::default()
        },
        ..StylizeOptions::default()
    }
}

#[test]
fn saved_checkpoint_stylizes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig {
        zero_init_deltas: false,
        ..NetConfig::tiny()
    };
    let model = Model::new(cfg, Precision::F32).unwrap();
    let path = dir.path().join("m.neat");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let (c, s) = (random_image(1, 24, 32), random_image(2, 16, 16));
    let a = stylize(&model, &c, &s, &small_opts()).unwrap();
    assert_eq!(a, stylize(&loaded, &c, &s, &small_opts()).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.neat");
    Model::new(NetConfig::tiny(), Precision::F32).unwrap().save(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(Model::load(&path), Err(NeatError::Checkpoint(_))));
}

#[test]
fn files_to_trained_checkpoint_to_stylized_png() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for i in 0..2 {
        save_image(&random_image(10 + i, 20, 20), &p(&format!("c{i}.png"))).unwrap();
        save_image(&random_image(20 + i, 20, 20), &p(&format!("s{i}.png"))).unwrap();
    }
    fs::write(p("content.txt"), "c0.png\nc1.png\n").unwrap();
    fs::write(p("style.txt"), "# styles\ns0.png\ns1.png\n").unwrap();
    let text = "content_manifest = content.txt\nstyle_manifest = style.txt\nout_dir = run\n\
                crop_size = 16\nbatch = 4\nsteps = 3\ncheckpoint_every = 2\nbase_width = 2\ncode_dim = 4\n\
                head_hidden = 6\ndisc_width = 2\npatch_width = 2\npatch_hidden = 4\npatch_size = 8\n\
                n_patches = 4\nbilateral_diameter = 5\naccumulation_subbatch = 2\n";
    fs::write(p("train.cfg"), text).unwrap();
    let cfg = TrainConfig::load(&p("train.cfg")).unwrap();
    let summary = fit(&cfg).unwrap();
    assert_eq!(summary.steps_run, 3);
    assert!(p("run/ckpt_000002.neat").is_file());
    let csv = fs::read_to_string(&summary.loss_csv).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let model = Model::load(&summary.final_checkpoint).unwrap();
    let out = stylize(&model, &load_image(&p("c0.png")).unwrap(), &load_image(&p("s1.png")).unwrap(), &small_opts())
        .unwrap();
    assert_eq!((out.height(), out.width()), (20, 20));
    save_image(&out, &p("out.png")).unwrap();
    assert!(load_image(&p("out.png")).unwrap().max_abs_diff(&out) <= 0.5 / 255.0 + 1e-12);
}
