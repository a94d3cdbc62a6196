use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use neat_core::evalkit::{self, BenchOptions, MetricReport};
use neat_core::imgproc::{load_image, prior_stages, save_image, PriorConfig};
use neat_core::infer::{self, OutputSize, StyleRef, StylizeOptions};
use neat_core::nets::{Model, NetConfig, Precision};
use neat_core::train::{self, TrainConfig};
use neat_core::NeatError;

#[derive(Debug, Parser)]
#[command(name = "neat", version, about = "Neural style transfer with a content prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Train from a key=value config file.
    Train(TrainArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// Write one stylization per alpha, from reconstruction to amplification.
    Interp(InterpArgs),
    /// Write every intermediate stage of the content prior.
    Prior(PriorArgs),
    /// Stylize and score every pair listed in a CSV file.
    Eval(EvalArgs),
    /// Time stylization at several resolutions.
    Bench(BenchArgs),
    /// Stylize every frame in a directory with identical settings.
    Frames(FramesArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder base width.
    #[arg(long, default_value_t = NetConfig::default().base_width)]
    pub base_width: usize,
    /// Storage precision: f32 or f64.
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config file.
    #[arg(long)]
    pub config: PathBuf,
}

/// Content-prior and output-size flags shared by the image commands.
#[derive(Debug, Args)]
pub struct PriorFlags {
    /// Skip the Gaussian blur before the bilateral filter.
    #[arg(long, conflicts_with = "blur_kernel")]
    pub no_prior_blur: bool,
    /// Odd Gaussian kernel size; sigma follows from it.
    #[arg(long, default_value_t = PriorConfig::default().blur_kernel)]
    pub blur_kernel: usize,
    /// Odd bilateral filter diameter in pixels.
    #[arg(long = "bilateral-d", default_value_t = PriorConfig::default().bilateral_diameter)]
    pub bilateral_d: usize,
    /// Bilateral sigma, shared by the range (0-255 units) and spatial terms.
    #[arg(long, default_value_t = PriorConfig::default().bilateral_sigma)]
    pub bilateral_sigma: f64,
    /// Process with the longer side at about N pixels instead of the native size.
    #[arg(long)]
    pub size: Option<usize>,
}

impl PriorFlags {
    fn prior(&self) -> PriorConfig {
        PriorConfig {
            blur_enabled: !self.no_prior_blur,
            bilateral_diameter: self.bilateral_d,
            bilateral_sigma: self.bilateral_sigma,
            ..PriorConfig::default().with_blur_kernel(self.blur_kernel)
        }
    }

    fn options(&self, alpha: f64) -> Result<StylizeOptions> {
        let opts = StylizeOptions {
            alpha,
            prior: self.prior(),
            size: self.size.map_or(OutputSize::Native, OutputSize::LongSide),
        };
        opts.validate().map_err(usage)?;
        Ok(opts)
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    /// Content image.
    #[arg(long)]
    pub content: PathBuf,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output image (PNG or JPEG by extension).
    #[arg(long)]
    pub out: PathBuf,
    /// Style strength: 0 reconstructs, 1 stylizes, above 1 amplifies.
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    #[command(flatten)]
    pub prior: PriorFlags,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    /// Content image.
    #[arg(long)]
    pub content: PathBuf,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; one alpha_<value>.png per alpha.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated alphas.
    #[arg(long, default_value = "0,0.25,0.5,0.75,1,1.25,1.5", value_delimiter = ',', value_parser = parse_alpha)]
    pub alpha_list: Vec<f64>,
    #[command(flatten)]
    pub prior: PriorFlags,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// Content image.
    #[arg(long)]
    pub content: PathBuf,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Output directory for the stage images.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub prior: PriorFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with a `content_path,style_path` header; relative paths resolve
    /// against the CSV's directory.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Method name shown in the summary table.
    #[arg(long, default_value = "neat")]
    pub method: String,
    /// Points sampled per image for the colour distance; 0 uses all pixels.
    #[arg(long, default_value_t = 4096)]
    pub chamfer_sample: usize,
    /// Seed for the colour-distance subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Style strength used for the stylizations.
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    #[command(flatten)]
    pub prior: PriorFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated resolutions, each `N` (square) or `WxH`.
    #[arg(long, default_value = "256,512,1920x1080", value_delimiter = ',', value_parser = parse_resolution)]
    pub sizes: Vec<(usize, usize)>,
    /// Timed runs per cell; the median is reported.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Untimed warm-up runs per cell.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Seed for the synthetic inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the timings as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FramesArgs {
    /// Directory of PNG or JPEG frames.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Style image.
    #[arg(long)]
    pub style: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; file names are kept.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Style strength.
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    #[command(flatten)]
    pub prior: PriorFlags,
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
    if a.is_finite() && a >= 0.0 {
        Ok(a)
    } else {
        Err(format!("alpha {a} must be finite and >= 0"))
    }
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let s = s.trim();
    let num = |t: &str| t.parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (num(w)?, num(h)?),
        None => (num(s)?, num(s)?),
    };
    if w == 0 || h == 0 {
        return Err(format!("`{s}`: sizes must be positive"));
    }
    Ok((h, w))
}

/// A flag value that parsed but is not usable.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// Maps a failure to the documented exit code.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(n) = cause.downcast_ref::<NeatError>() {
            if matches!(n, NeatError::Data { .. } | NeatError::Checkpoint(_) | NeatError::Image(_)) {
                return 3;
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    2
}

fn missing(path: &Path, what: &str) -> anyhow::Error {
    NeatError::Data {
        path: path.to_path_buf(),
        reason: format!("{what} not found"),
    }
    .into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(missing(path, what))
    }
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path, "checkpoint")?;
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_image(path: &Path, what: &str) -> Result<neat_core::ImageTensor> {
    require_file(path, what)?;
    Ok(load_image(path)?)
}

fn write_image(img: &neat_core::ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_image(img, path).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Train(a) => train_cmd(a),
        Command::Stylize(a) => stylize(a),
        Command::Interp(a) => interp(a),
        Command::Prior(a) => prior(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Frames(a) => frames(a),
    }
}

fn init(a: InitArgs) -> Result<()> {
    let precision = Precision::parse(&a.precision).map_err(usage)?;
    let cfg = NetConfig {
        base_width: a.base_width,
        seed: a.seed,
        ..NetConfig::default()
    };
    let model = Model::new(cfg, precision).map_err(usage)?;
    model.save(&a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    require_file(&a.config, "config file")?;
    let cfg = TrainConfig::load(&a.config).map_err(|e| match e {
        NeatError::Config(_) | NeatError::InvalidArgument(_) => usage(e),
        other => other.into(),
    })?;
    let summary = train::fit(&cfg)?;
    info!(
        "ran {} steps; final checkpoint {}, losses in {}",
        summary.steps_run,
        summary.final_checkpoint.display(),
        summary.loss_csv.display()
    );
    Ok(())
}

fn stylize(a: StylizeArgs) -> Result<()> {
    let opts = a.prior.options(a.alpha)?;
    let model = load_model(&a.checkpoint)?;
    let content = read_image(&a.content, "content image")?;
    let style = read_image(&a.style, "style image")?;
    let out = infer::stylize(&model, &content, &style, &opts)?;
    write_image(&out, &a.out)
}

fn alpha_name(a: f64) -> String {
    format!("alpha_{a:.2}.png")
}

fn interp(a: InterpArgs) -> Result<()> {
    if a.alpha_list.is_empty() {
        return Err(usage("--alpha-list is empty"));
    }
    let base = a.prior.options(1.0)?;
    let model = load_model(&a.checkpoint)?;
    let content = read_image(&a.content, "content image")?;
    let style = StyleRef::new(&model, &read_image(&a.style, "style image")?)?;
    for &alpha in &a.alpha_list {
        let opts = StylizeOptions { alpha, ..base.clone() };
        let img = infer::stylize_with(&model, &content, &style, &opts)?;
        let path = a.out.join(alpha_name(alpha));
        write_image(&img, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn prior(a: PriorArgs) -> Result<()> {
    let cfg = a.prior.options(1.0)?.prior;
    let content = read_image(&a.content, "content image")?;
    let style = read_image(&a.style, "style image")?;
    let content = match a.prior.size {
        Some(n) => {
            let ((h, w), _) = infer::working_size(content.height(), content.width(), OutputSize::LongSide(n))?;
            content.resize_bilinear(h, w)?
        }
        None => content,
    };
    let stages = prior_stages(&content, &style, &cfg)?;
    if let Some(b) = &stages.blurred {
        write_image(b, &a.out.join("1_blurred.png"))?;
    }
    write_image(&stages.filtered, &a.out.join("2_filtered.png"))?;
    write_image(&stages.recolored, &a.out.join("3_recolored.png"))?;
    write_image(&stages.weighted, &a.out.join("4_weighted.png"))?;
    info!("wrote prior stages to {}", a.out.display());
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    require_file(path, "pairs CSV")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "content_path" || &headers[1] != "style_path" {
        return Err(NeatError::Data {
            path: path.to_path_buf(),
            reason: "expected header `content_path,style_path`".into(),
        }
        .into());
    }
    let mut pairs = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| NeatError::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        pairs.push((base.join(&row[0]), base.join(&row[1])));
    }
    if pairs.is_empty() {
        return Err(NeatError::Data {
            path: path.to_path_buf(),
            reason: "no pairs listed".into(),
        }
        .into());
    }
    Ok(pairs)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn eval(a: EvalArgs) -> Result<()> {
    let opts = a.prior.options(a.alpha)?;
    let pairs = read_pairs(&a.pairs)?;
    let model = load_model(&a.checkpoint)?;
    let sample = (a.chamfer_sample > 0).then_some(a.chamfer_sample);
    let mut report = MetricReport::default();
    for (content_path, style_path) in &pairs {
        let content = read_image(content_path, "content image")?;
        let style = read_image(style_path, "style image")?;
        let stylized = infer::stylize(&model, &content, &style, &opts)?;
        let label = format!("{}__{}", stem(content_path), stem(style_path));
        report
            .pairs
            .push(evalkit::evaluate_pair(&model, label, &content, &style, &stylized, sample, a.seed)?);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, report.to_csv())?;
    print!("{}", report.to_table(&a.method));
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let model = load_model(&a.checkpoint)?;
    let opts = BenchOptions {
        warmup: a.warmup,
        runs: a.runs,
        seed: a.seed,
        ..BenchOptions::default()
    };
    let report = evalkit::bench(&model, &a.sizes, &opts);
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn frames(a: FramesArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let opts = a.prior.options(a.alpha)?;
    if !a.input.is_dir() {
        return Err(missing(&a.input, "frame directory"));
    }
    let model = load_model(&a.checkpoint)?;
    let style = read_image(&a.style, "style image")?;
    let report = infer::stylize_frames(&model, &a.input, &style, &opts, &a.out, a.jobs)?;
    info!("wrote {} frames, skipped {}", report.written.len(), report.skipped.len());
    if report.written.is_empty() {
        bail!("no frame could be decoded");
    }
    Ok(())
}
