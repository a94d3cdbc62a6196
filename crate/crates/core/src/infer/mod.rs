//! Inference: prior construction, stylization, feature interpolation and
//! amplification, and frame-directory processing.
//!
//! Inference only reads parameters, so a [`Model`] can be shared across
//! threads.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::diff::Tensor;
use crate::error::{NeatError, Result};
use crate::imgproc::{build_prior, load_image, save_image, self_prior, ImageTensor, PriorConfig};
use crate::nets::{arch, Ctx, FeaturePyramid, Model};

/// Working resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutputSize {
    /// Process at the largest multiple-of-8 size not above the input, then
    /// resize the result back to the input size.
    #[default]
    Native,
    /// Resize so the longer side is about this many pixels (rounded down to a
    /// multiple of 8) and return the result at that size.
    LongSide(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizeOptions {
    /// 0 reconstructs the content, 1 is plain stylization, above 1 amplifies.
    pub alpha: f64,
    pub prior: PriorConfig,
    pub size: OutputSize,
}

impl Default for StylizeOptions {
    fn default() -> Self {
        StylizeOptions {
            alpha: 1.0,
            prior: PriorConfig::default(),
            size: OutputSize::Native,
        }
    }
}

impl StylizeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(NeatError::invalid(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        self.prior.validate()
    }
}

fn floor8(n: usize) -> usize {
    n / 8 * 8
}

/// `(working, final)` dimensions for an input of `h`×`w`.
pub fn working_size(h: usize, w: usize, size: OutputSize) -> Result<((usize, usize), (usize, usize))> {
    let (th, tw) = match size {
        OutputSize::Native => (h, w),
        OutputSize::LongSide(n) => {
            let k = n as f64 / h.max(w) as f64;
            let th = floor8((h as f64 * k).round() as usize);
            let tw = floor8((w as f64 * k).round() as usize);
            (th, tw)
        }
    };
    let work = (floor8(th), floor8(tw));
    if work.0 < 8 || work.1 < 8 {
        return Err(NeatError::invalid(format!(
            "image {h}x{w} is too small to stylize at {size:?}"
        )));
    }
    Ok((work, (th, tw)))
}

fn fit8(img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (floor8(img.height()), floor8(img.width()));
    if h < 8 || w < 8 {
        return Err(NeatError::invalid(format!(
            "image {}x{} is smaller than 8x8",
            img.height(),
            img.width()
        )));
    }
    img.resize_bilinear(h, w)
}

/// A style image prepared once and reused across many contents.
#[derive(Clone, Debug)]
pub struct StyleRef {
    pub image: ImageTensor,
    pub features: FeaturePyramid,
}

impl StyleRef {
    pub fn new(model: &Model, style: &ImageTensor) -> Result<Self> {
        let image = fit8(style)?;
        let features = model.encode(&image)?;
        Ok(StyleRef { image, features })
    }
}

/// Intermediates of an interpolated stylization.
#[derive(Clone, Debug)]
pub struct InterpOutput {
    pub image: ImageTensor,
    /// Features fed to the decoder.
    pub decoder_input: Tensor,
    /// Prior the deltas are added to; may leave [0, 1] when `alpha > 1`.
    pub base: Tensor,
}

/// `clamp(base + decoder(fused))`, with `base` taken as-is.
fn decode(model: &Model, fused: &Tensor, base: &Tensor) -> Result<ImageTensor> {
    let mut ctx = Ctx::frozen(&model.params);
    let f = ctx.tape.constant(fused.clone());
    let b = ctx.tape.constant(base.clone());
    let (_, out) = arch::decode_deltas(&mut ctx, f, b)?;
    ImageTensor::from_tensor(ctx.tape.value(out))
}

fn finish(img: ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    img.resize_bilinear(target.0, target.1)
}

fn prepare_content(content: &ImageTensor, opts: &StylizeOptions) -> Result<(ImageTensor, (usize, usize))> {
    content.require_rgb("stylize")?;
    let (work, target) = working_size(content.height(), content.width(), opts.size)?;
    Ok((content.resize_bilinear(work.0, work.1)?, target))
}

/// Stylization at `opts.alpha` against a prepared style.
pub fn stylize_with(model: &Model, content: &ImageTensor, style: &StyleRef, opts: &StylizeOptions) -> Result<ImageTensor> {
    opts.validate()?;
    if opts.alpha != 1.0 {
        return Ok(interp_with(model, content, style, opts)?.image);
    }
    let (c, target) = prepare_content(content, opts)?;
    let prior = build_prior(&c, &style.image, &opts.prior)?;
    let fused = model.transform(&model.encode(&prior)?, &style.features)?;
    finish(decode(model, &fused, &prior.to_tensor())?, target)
}

/// Stylizes `content` in the manner of `style`: the decoder predicts RGB
/// deltas over the weighted content prior.
pub fn stylize(model: &Model, content: &ImageTensor, style: &ImageTensor, opts: &StylizeOptions) -> Result<ImageTensor> {
    stylize_with(model, content, &StyleRef::new(model, style)?, opts)
}

/// Decoder features and base of the reconstruction endpoint: the content's
/// own unrecoloured prior, stylized with itself.
fn reconstruction_parts(model: &Model, c: &ImageTensor, prior: &PriorConfig) -> Result<(Tensor, ImageTensor)> {
    let own = self_prior(c, prior)?;
    let f = model.encode(&own)?;
    Ok((model.transform(&f, &f)?, own))
}

/// The reconstruction endpoint (`alpha = 0`).
pub fn reconstruct(model: &Model, content: &ImageTensor, opts: &StylizeOptions) -> Result<ImageTensor> {
    let (c, target) = prepare_content(content, opts)?;
    let (f, base) = reconstruction_parts(model, &c, &opts.prior)?;
    finish(decode(model, &f, &base.to_tensor())?, target)
}

fn interp_with(model: &Model, content: &ImageTensor, style: &StyleRef, opts: &StylizeOptions) -> Result<InterpOutput> {
    opts.validate()?;
    let (c, target) = prepare_content(content, opts)?;
    let (f_rec, own) = reconstruction_parts(model, &c, &opts.prior)?;
    let prior = build_prior(&c, &style.image, &opts.prior)?;
    let f_sty = model.transform(&model.encode(&prior)?, &style.features)?;
    let a = opts.alpha;
    let decoder_input = Tensor::lerp(&f_rec, &f_sty, a)?;
    let base = Tensor::lerp(&own.to_tensor(), &prior.to_tensor(), a)?;
    let image = finish(decode(model, &decoder_input, &base)?, target)?;
    Ok(InterpOutput {
        image,
        decoder_input,
        base,
    })
}

/// Interpolates decoder features and base prior between reconstruction
/// (`alpha = 0`) and stylization (`alpha = 1`); larger values extrapolate.
pub fn stylize_interp(
    model: &Model,
    content: &ImageTensor,
    style: &ImageTensor,
    opts: &StylizeOptions,
) -> Result<InterpOutput> {
    interp_with(model, content, &StyleRef::new(model, style)?, opts)
}

/// Result of a frame-directory run.
#[derive(Clone, Debug, Default)]
pub struct FramesReport {
    pub written: Vec<PathBuf>,
    /// Frames that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Stylizes every image in `in_dir` (sorted by name) with identical options,
/// writing outputs under the same file names in `out_dir`. Unreadable frames
/// are skipped with a warning. `jobs` bounds the worker threads.
pub fn stylize_frames(
    model: &Model,
    in_dir: &Path,
    style: &ImageTensor,
    opts: &StylizeOptions,
    out_dir: &Path,
    jobs: usize,
) -> Result<FramesReport> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(in_dir)
        .map_err(|e| NeatError::Data {
            path: in_dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(NeatError::Data {
            path: in_dir.to_path_buf(),
            reason: "no PNG or JPEG frames found".into(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let style = StyleRef::new(model, style)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| NeatError::invalid(e.to_string()))?;
    // Outer error: fatal. Inner error: the frame could not be decoded.
    let results: Vec<Result<std::result::Result<PathBuf, (PathBuf, String)>>> = pool.install(|| {
        frames
            .par_iter()
            .map(|p| {
                let img = match load_image(p) {
                    Ok(img) => img,
                    Err(e) => return Ok(Err((p.clone(), e.to_string()))),
                };
                let out = out_dir.join(p.file_name().expect("listed files have names"));
                save_image(&stylize_with(model, &img, &style, opts)?, &out)?;
                Ok(Ok(out))
            })
            .collect()
    });
    let mut report = FramesReport::default();
    for r in results {
        match r? {
            Ok(out) => report.written.push(out),
            Err((p, reason)) => {
                log::warn!("skipping frame {}: {reason}", p.display());
                report.skipped.push((p, reason));
            }
        }
    }
    Ok(report)
}
