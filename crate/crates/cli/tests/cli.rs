use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neat_core::imgproc::{load_image, save_image};
use neat_core::ImageTensor;

fn neat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pattern(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..3 * h * w)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 256) as f64 / 255.0
        })
        .collect();
    ImageTensor::new(3, h, w, data).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        save_image(&pattern(1, 32, 32), &f.path("content.png")).unwrap();
        save_image(&pattern(2, 24, 40), &f.path("style.png")).unwrap();
        let out = neat(&["init", "--out", s(&f.path("model.neat")), "--base-width", "2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const SMALL_PRIOR: [&str; 2] = ["--bilateral-d", "5"];

fn stylize_args<'a>(f: &'a Fixture, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "stylize".into(),
        "--content".into(),
        s(&f.path("content.png")).into(),
        "--style".into(),
        s(&f.path("style.png")).into(),
        "--checkpoint".into(),
        s(&f.path("model.neat")).into(),
        "--out".into(),
        s(out).into(),
    ];
    v.extend(SMALL_PRIOR.iter().map(|a| a.to_string()));
    v.extend(extra.iter().map(|a| a.to_string()));
    v
}

fn run_owned(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    neat(&refs)
}

#[test]
fn help_snapshots_match() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let subs = ["", "init", "train", "stylize", "interp", "prior", "eval", "bench", "frames"];
    for sub in subs {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let out = neat(&args);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        let file = dir.join(format!("help_{}.txt", if sub.is_empty() { "neat" } else { sub }));
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&file, &text).unwrap();
        } else {
            let want = fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing snapshot {}", file.display()));
            assert_eq!(text, want, "help for `{sub}` changed; rerun with UPDATE_SNAPSHOTS=1");
        }
    }
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let text = stdout(&neat(&["stylize", "--help"]));
    for flag in [
        "--content",
        "--style",
        "--checkpoint",
        "--out",
        "--alpha",
        "--no-prior-blur",
        "--blur-kernel",
        "--bilateral-d",
        "--bilateral-sigma",
        "--size",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 1]"));
    assert!(text.contains("[default: 25]"));
    assert!(stdout(&neat(&["interp", "--help"])).contains("--alpha-list"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&neat(&[])), 1);
    assert_eq!(code(&neat(&["stylize", "--bogus"])), 1);
    assert_eq!(code(&neat(&["frobnicate"])), 1);
    let f = Fixture::new();
    let out = run_owned(&stylize_args(&f, &f.path("o.png"), &["--no-prior-blur", "--blur-kernel", "5"]));
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let out = run_owned(&stylize_args(&f, &f.path("o.png"), &["--alpha", "-0.5"]));
    assert_eq!(code(&out), 1);
    let out = run_owned(&stylize_args(&f, &f.path("o.png"), &["--blur-kernel", "4"]));
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!f.path("o.png").exists());
}

#[test]
fn missing_inputs_exit_3_naming_the_path() {
    let f = Fixture::new();
    let mut args = stylize_args(&f, &f.path("o.png"), &[]);
    let gone = f.path("nope.png");
    args[2] = s(&gone).into();
    let out = run_owned(&args);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nope.png"));

    let out = neat(&["train", "--config", s(&f.path("missing.cfg"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("missing.cfg"));

    fs::write(f.path("bad.neat"), b"garbage").unwrap();
    let mut args = stylize_args(&f, &f.path("o.png"), &[]);
    args[6] = s(&f.path("bad.neat")).into();
    assert_eq!(code(&run_owned(&args)), 3);
}

#[test]
fn zero_initialized_stylize_equals_weighted_prior() {
    let f = Fixture::new();
    let out = run_owned(&stylize_args(&f, &f.path("styl.png"), &[]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = neat(&[
        "prior",
        "--content",
        s(&f.path("content.png")),
        "--style",
        s(&f.path("style.png")),
        "--out",
        s(&f.path("stages")),
        "--bilateral-d",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for stage in ["1_blurred", "2_filtered", "3_recolored", "4_weighted"] {
        assert!(f.path(&format!("stages/{stage}.png")).is_file(), "{stage}");
    }
    let a = load_image(&f.path("styl.png")).unwrap();
    let b = load_image(&f.path("stages/4_weighted.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_invocations_write_identical_bytes() {
    let f = Fixture::new();
    for name in ["a.png", "b.png"] {
        let out = run_owned(&stylize_args(&f, &f.path(name), &["--alpha", "1.5", "--size", "24"]));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(fs::read(f.path("a.png")).unwrap(), fs::read(f.path("b.png")).unwrap());
}

#[test]
fn interp_writes_one_image_per_alpha() {
    let f = Fixture::new();
    let out = neat(&[
        "interp",
        "--content",
        s(&f.path("content.png")),
        "--style",
        s(&f.path("style.png")),
        "--checkpoint",
        s(&f.path("model.neat")),
        "--out",
        s(&f.path("interp")),
        "--alpha-list",
        "0,0.5,1.25",
        "--bilateral-d",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for a in ["0.00", "0.50", "1.25"] {
        assert!(f.path(&format!("interp/alpha_{a}.png")).is_file());
    }
}

#[test]
fn eval_writes_rows_and_aggregate() {
    let f = Fixture::new();
    fs::write(f.path("pairs.csv"), "content_path,style_path\ncontent.png,style.png\nstyle.png,content.png\n").unwrap();
    let out = neat(&[
        "eval",
        "--pairs",
        s(&f.path("pairs.csv")),
        "--checkpoint",
        s(&f.path("model.neat")),
        "--out",
        s(&f.path("metrics.csv")),
        "--bilateral-d",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(f.path("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "pair,chamfer,sifid,content_proxy");
    assert!(lines[3].starts_with("mean,"));
    assert!(stdout(&out).contains("SIFID"));

    fs::write(f.path("bad.csv"), "content_path,style_path\ncontent.png,absent.png\n").unwrap();
    let out = neat(&[
        "eval",
        "--pairs",
        s(&f.path("bad.csv")),
        "--checkpoint",
        s(&f.path("model.neat")),
        "--out",
        s(&f.path("m2.csv")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bench_prints_a_table() {
    let f = Fixture::new();
    let out = neat(&[
        "bench",
        "--checkpoint",
        s(&f.path("model.neat")),
        "--sizes",
        "16,24x16",
        "--runs",
        "1",
        "--warmup",
        "0",
        "--csv",
        s(&f.path("bench.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("16x16") && text.contains("24x16"), "{text}");
    assert_eq!(fs::read_to_string(f.path("bench.csv")).unwrap().lines().count(), 3);
    assert_eq!(code(&neat(&["bench", "--checkpoint", "x", "--sizes", "0"])), 1);
}

#[test]
fn frames_processes_a_directory() {
    let f = Fixture::new();
    let frames = f.path("frames");
    fs::create_dir(&frames).unwrap();
    for i in 0..3 {
        save_image(&pattern(10 + i, 16, 16), &frames.join(format!("f{i:03}.png"))).unwrap();
    }
    let out = neat(&[
        "frames",
        "--in",
        s(&frames),
        "--style",
        s(&f.path("style.png")),
        "--checkpoint",
        s(&f.path("model.neat")),
        "--out",
        s(&f.path("styled")),
        "--jobs",
        "2",
        "--bilateral-d",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(f.path("styled")).unwrap().count(), 3);
    let out = neat(&[
        "frames",
        "--in",
        s(&f.path("no_such_dir")),
        "--style",
        s(&f.path("style.png")),
        "--checkpoint",
        s(&f.path("model.neat")),
        "--out",
        s(&f.path("styled2")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_runs_from_a_config() {
    let f = Fixture::new();
    fs::write(f.path("content.txt"), "content.png\n").unwrap();
    fs::write(f.path("style.txt"), "style.png\n").unwrap();
    let cfg = "\
content_manifest = content.txt
style_manifest = style.txt
out_dir = run
crop_size = 16
batch = 2
steps = 2
checkpoint_every = 1
base_width = 2
code_dim = 4
head_hidden = 6
disc_width = 2
patch_width = 2
patch_hidden = 4
patch_size = 8
n_patches = 2
bilateral_diameter = 5
";
    fs::write(f.path("train.cfg"), cfg).unwrap();
    let out = neat(&["train", "--config", s(&f.path("train.cfg"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(f.path("run/final.neat").is_file());
    assert_eq!(fs::read_to_string(f.path("run/losses.csv")).unwrap().lines().count(), 3);

    fs::write(f.path("bad.cfg"), "colour = blue\n").unwrap();
    let out = neat(&["train", "--config", s(&f.path("bad.cfg"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown key"));
}
