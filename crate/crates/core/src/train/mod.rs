//! Training: data manifests, the per-step objective with optional logit
//! accumulation, the optimizer, checkpointing and the resumable `fit` loop.
//!
//! Runs are deterministic given the seed: crops, pairings, patch positions
//! and contrastive positives all derive from `(seed, step)`.

mod adam;
mod data;
mod objective;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub use adam::Adam;
pub use data::{grid_shape, random_crop, sample_batch, Manifest};
pub use objective::{
    compute_step, contrastive_direct, logit_accumulated_contrastive, mix_seed, Batch, CodeHead, ContrastiveOutcome,
    StepGradients, StepSettings,
};

use crate::error::{NeatError, Result};
use crate::imgproc::PriorConfig;
use crate::losses::{LossReport, LossWeights, PatchSettings, TERM_NAMES};
use crate::nets::{Container, Model, NetConfig, Precision};

/// Settings of a training run, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub content_manifest: PathBuf,
    pub style_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub crop_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub accumulation_subbatch: Option<usize>,
    /// Save `ckpt_<step>.neat` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub prior: PriorConfig,
    pub patch: PatchSettings,
    pub net: NetConfig,
    pub precision: Precision,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            content_manifest: PathBuf::new(),
            style_manifest: PathBuf::new(),
            out_dir: PathBuf::from("run"),
            crop_size: 256,
            batch: 4,
            steps: 1000,
            learning_rate: 1e-4,
            seed: 0,
            accumulation_subbatch: None,
            checkpoint_every: 500,
            weights: LossWeights::default(),
            prior: PriorConfig::default(),
            patch: PatchSettings::default(),
            net: NetConfig::default(),
            precision: Precision::F32,
            resume: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| NeatError::Config(format!("line {line}: bad value `{raw}` for `{key}`")))
}

impl TrainConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut blur_sigma = None;
        let mut net_seed = None;
        for (n, raw_line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| NeatError::Config(format!("line {line_no}: expected `key = value`")))?;
            let path = || base.join(value);
            macro_rules! set {
                ($field:expr) => {
                    $field = parse_value(key, value, line_no)?
                };
            }
            match key {
                "content_manifest" => cfg.content_manifest = path(),
                "style_manifest" => cfg.style_manifest = path(),
                "out_dir" => cfg.out_dir = path(),
                "resume" => cfg.resume = Some(path()),
                "crop_size" => set!(cfg.crop_size),
                "batch" => set!(cfg.batch),
                "steps" => set!(cfg.steps),
                "learning_rate" => set!(cfg.learning_rate),
                "seed" => set!(cfg.seed),
                "accumulation_subbatch" => cfg.accumulation_subbatch = Some(parse_value(key, value, line_no)?),
                "checkpoint_every" => set!(cfg.checkpoint_every),
                "patch_size" => set!(cfg.patch.size),
                "n_patches" => set!(cfg.patch.count),
                "precision" => cfg.precision = Precision::parse(value)?,
                "base_width" => set!(cfg.net.base_width),
                "code_dim" => set!(cfg.net.code_dim),
                "head_hidden" => set!(cfg.net.head_hidden),
                "disc_width" => set!(cfg.net.disc_width),
                "patch_width" => set!(cfg.net.patch_width),
                "patch_hidden" => set!(cfg.net.patch_hidden),
                "init_seed" => net_seed = Some(parse_value(key, value, line_no)?),
                "identity_pixel" => set!(cfg.weights.identity_pixel),
                "identity_feature" => set!(cfg.weights.identity_feature),
                "tau" => set!(cfg.weights.tau),
                "blur" => set!(cfg.prior.blur_enabled),
                "blur_kernel" => set!(cfg.prior.blur_kernel),
                "blur_sigma" => blur_sigma = Some(parse_value(key, value, line_no)?),
                "bilateral_diameter" => set!(cfg.prior.bilateral_diameter),
                "bilateral_sigma" => set!(cfg.prior.bilateral_sigma),
                "prior_weight" => set!(cfg.prior.prior_weight),
                _ => match key.strip_prefix("lambda.").and_then(|t| TERM_NAMES.iter().position(|n| *n == t)) {
                    Some(i) => set!(cfg.weights.lambda[i]),
                    None => return Err(NeatError::Config(format!("line {line_no}: unknown key `{key}`"))),
                },
            }
        }
        cfg.prior.blur_sigma = blur_sigma.unwrap_or_else(|| PriorConfig::sigma_for_kernel(cfg.prior.blur_kernel));
        cfg.net.seed = net_seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NeatError::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        TrainConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeatError::Config(m));
        if self.crop_size < 8 || !self.crop_size.is_multiple_of(8) {
            return bad(format!("crop_size {} must be a positive multiple of 8", self.crop_size));
        }
        if self.batch < 2 {
            return bad(format!("batch {} must be at least 2", self.batch));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if let Some(s) = self.accumulation_subbatch {
            if s == 0 || !self.batch.is_multiple_of(s) {
                return bad(format!("accumulation_subbatch {s} must divide batch {}", self.batch));
            }
        }
        if self.patch.size == 0 || self.patch.size > self.crop_size {
            return bad(format!(
                "patch_size {} must be in 1..={}",
                self.patch.size, self.crop_size
            ));
        }
        if self.patch.count < 2 || !self.patch.count.is_multiple_of(2) {
            return bad(format!("n_patches {} must be even and >= 2", self.patch.count));
        }
        self.weights.validate()?;
        self.prior.validate().map_err(|e| NeatError::Config(e.to_string()))
    }

    /// Resolved settings in config-file syntax, for run logs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("content_manifest", self.content_manifest.display().to_string());
        kv("style_manifest", self.style_manifest.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        if let Some(r) = &self.resume {
            kv("resume", r.display().to_string());
        }
        kv("crop_size", self.crop_size.to_string());
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("seed", self.seed.to_string());
        if let Some(a) = self.accumulation_subbatch {
            kv("accumulation_subbatch", a.to_string());
        }
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("patch_size", self.patch.size.to_string());
        kv("n_patches", self.patch.count.to_string());
        kv("precision", self.precision.as_str().to_string());
        kv("base_width", self.net.base_width.to_string());
        kv("code_dim", self.net.code_dim.to_string());
        kv("head_hidden", self.net.head_hidden.to_string());
        kv("disc_width", self.net.disc_width.to_string());
        kv("patch_width", self.net.patch_width.to_string());
        kv("patch_hidden", self.net.patch_hidden.to_string());
        kv("init_seed", self.net.seed.to_string());
        for (name, l) in TERM_NAMES.iter().zip(&self.weights.lambda) {
            kv(&format!("lambda.{name}"), l.to_string());
        }
        kv("identity_pixel", self.weights.identity_pixel.to_string());
        kv("identity_feature", self.weights.identity_feature.to_string());
        kv("tau", self.weights.tau.to_string());
        kv("blur", self.prior.blur_enabled.to_string());
        kv("blur_kernel", self.prior.blur_kernel.to_string());
        kv("blur_sigma", self.prior.blur_sigma.to_string());
        kv("bilateral_diameter", self.prior.bilateral_diameter.to_string());
        kv("bilateral_sigma", self.prior.bilateral_sigma.to_string());
        kv("prior_weight", self.prior.prior_weight.to_string());
        s
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            weights: self.weights.clone(),
            prior: self.prior.clone(),
            patch: self.patch.clone(),
            subbatch: self.accumulation_subbatch,
        }
    }
}

/// Which parameter groups a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    Both,
    DiscriminatorOnly,
    GeneratorOnly,
}

/// Model, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub settings: StepSettings,
    gen_opt: Adam,
    disc_opt: Adam,
    step: usize,
}

const GEN_PREFIX: &str = "opt.gen.";
const DISC_PREFIX: &str = "opt.disc.";

impl Trainer {
    pub fn new(model: Model, settings: StepSettings, learning_rate: f64) -> Self {
        Trainer {
            model,
            settings,
            gen_opt: Adam::new(learning_rate),
            disc_opt: Adam::new(learning_rate),
            step: 0,
        }
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// One optimization step: discriminators first, then the generator, both
    /// from the same forward passes. On any non-finite value the step is
    /// abandoned and parameters and optimizer state are left as they were.
    pub fn train_step(&mut self, batch: &Batch, mode: UpdateMode) -> Result<LossReport> {
        let mut out = compute_step(&self.model, batch, &self.settings).inspect_err(|e| {
            log::error!("step {} aborted: {e}", self.step + 1);
        })?;
        let saved = (self.model.params.clone(), self.gen_opt.clone(), self.disc_opt.clone());
        let result = self.apply(&out, mode);
        if let Err(e) = result {
            (self.model.params, self.gen_opt, self.disc_opt) = saved;
            log::error!("step {} rolled back: {e}", self.step + 1);
            return Err(e);
        }
        self.step += 1;
        out.report.step = self.step;
        Ok(out.report)
    }

    fn apply(&mut self, g: &StepGradients, mode: UpdateMode) -> Result<()> {
        let mut updates = Vec::new();
        if mode != UpdateMode::GeneratorOnly {
            updates.extend(self.disc_opt.propose(&self.model.params, &g.discriminator)?);
        }
        if mode != UpdateMode::DiscriminatorOnly {
            updates.extend(self.gen_opt.propose(&self.model.params, &g.generator)?);
        }
        for (name, t) in updates {
            if !t.all_finite() {
                return Err(NeatError::NonFinite(format!("updated parameter `{name}`")));
            }
            self.model.params.set(&name, t)?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        let prec = self.model.params.precision();
        self.gen_opt.write_into(&mut c, GEN_PREFIX, prec);
        self.disc_opt.write_into(&mut c, DISC_PREFIX, prec);
        c.meta.insert("train.step".into(), self.step.to_string());
        c
    }

    pub fn from_container(c: &Container, settings: StepSettings, learning_rate: f64) -> Result<Self> {
        let model = Model::from_container(c)?;
        let step = c
            .meta
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NeatError::Config("checkpoint has no training step; not resumable".into()))?;
        let gen_opt = Adam::read_from(c, GEN_PREFIX, learning_rate)?;
        let disc_opt = Adam::read_from(c, DISC_PREFIX, learning_rate)?;
        Ok(Trainer {
            model,
            settings,
            gen_opt,
            disc_opt,
            step,
        })
    }

    /// Writes a checkpoint atomically so an interrupted write never replaces
    /// a good file.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_atomic(&self.to_container(), path)
    }
}

fn save_atomic(c: &Container, path: &Path) -> Result<()> {
    let tmp = path.with_extension("neat.partial");
    c.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps_run: usize,
    pub last: Option<LossReport>,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(NeatError::Data {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        })
    }
}

/// Rows of an existing loss log up to and including `step`.
fn retained_rows(path: &Path, step: usize) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let r = LossReport::parse_csv_row(line)?;
        if r.step <= step {
            rows.push(line.to_string());
        }
    }
    Ok(rows)
}

/// Runs (or resumes) training, writing `losses.csv`, periodic
/// `ckpt_<step>.neat` files and `final.neat` under `out_dir`.
pub fn fit(cfg: &TrainConfig) -> Result<FitSummary> {
    cfg.validate()?;
    require_file(&cfg.content_manifest)?;
    require_file(&cfg.style_manifest)?;
    if let Some(r) = &cfg.resume {
        require_file(r)?;
    }
    let contents = Manifest::load(&cfg.content_manifest)?.load_images()?;
    let styles = Manifest::load(&cfg.style_manifest)?.load_images()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("run_config.txt"), cfg.to_text())?;
    log::info!("training configuration:\n{}", cfg.to_text());

    let mut trainer = match &cfg.resume {
        Some(path) => {
            let t = Trainer::from_container(&Container::load(path)?, cfg.step_settings(), cfg.learning_rate)?;
            log::info!("resumed from {} at step {}", path.display(), t.step());
            t
        }
        None => Trainer::new(
            Model::new(cfg.net.clone(), cfg.precision)?,
            cfg.step_settings(),
            cfg.learning_rate,
        ),
    };

    let loss_csv = cfg.out_dir.join("losses.csv");
    let kept = if cfg.resume.is_some() {
        retained_rows(&loss_csv, trainer.step())?
    } else {
        Vec::new()
    };
    let mut csv = fs::File::create(&loss_csv)?;
    writeln!(csv, "{}", LossReport::csv_header())?;
    for row in kept {
        writeln!(csv, "{row}")?;
    }

    let start = trainer.step();
    let mut last = None;
    while trainer.step() < cfg.steps {
        let batch = sample_batch(&contents, &styles, cfg.batch, cfg.crop_size, cfg.seed, trainer.step())?;
        let report = trainer.train_step(&batch, UpdateMode::Both)?;
        writeln!(csv, "{}", report.csv_row())?;
        csv.flush()?;
        log::info!("step {} total {:.6}", report.step, report.total);
        if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 {
            trainer.save(&cfg.out_dir.join(format!("ckpt_{:06}.neat", report.step)))?;
        }
        last = Some(report);
    }
    let final_checkpoint = cfg.out_dir.join("final.neat");
    trainer.save(&final_checkpoint)?;
    Ok(FitSummary {
        final_checkpoint,
        loss_csv,
        steps_run: trainer.step() - start,
        last,
    })
}

#[cfg(test)]
mod tests;
