use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{mix_seed, Batch};
use crate::error::{NeatError, Result};
use crate::imgproc::{load_image, ImageTensor};

/// A newline-separated list of image paths relative to `base`.
/// Blank lines and lines starting with `#` are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub entries: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let entries: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect();
        if entries.is_empty() {
            return Err(NeatError::Data {
                path: base.to_path_buf(),
                reason: "manifest lists no images".into(),
            });
        }
        Ok(Manifest {
            base: base.to_path_buf(),
            entries,
        })
    }

    /// Reads a manifest whose entries are relative to its own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NeatError::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::parse(&text, &base).map_err(|e| match e {
            NeatError::Data { reason, .. } => NeatError::Data {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| self.base.join(e)).collect()
    }

    /// Decodes every listed image; the first failure is an error naming it.
    pub fn load_images(&self) -> Result<Vec<ImageTensor>> {
        self.paths()
            .iter()
            .map(|p| {
                load_image(p).map_err(|e| NeatError::Data {
                    path: p.clone(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}

/// Random `size`×`size` crop, upscaling first when the image is too small.
pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let upscaled;
    let src = if h < size || w < size {
        let k = size as f64 / h.min(w) as f64;
        let nh = ((h as f64 * k).ceil() as usize).max(size);
        let nw = ((w as f64 * k).ceil() as usize).max(size);
        upscaled = img.resize_bilinear(nh, nw)?;
        &upscaled
    } else {
        img
    };
    let top = rng.random_range(0..=src.height() - size);
    let left = rng.random_range(0..=src.width() - size);
    src.crop(top, left, size, size)
}

/// Contents per batch: two whenever the batch splits evenly, so each style
/// appears with at least two contents.
pub fn grid_shape(batch: usize) -> (usize, usize) {
    let n_c = if batch.is_multiple_of(2) { 2 } else { 1 };
    (n_c, batch / n_c)
}

fn pick(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    if pool >= n {
        sample(rng, pool, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// The batch for `step`, fully determined by `(seed, step)`.
pub fn sample_batch(
    contents: &[ImageTensor],
    styles: &[ImageTensor],
    batch: usize,
    crop: usize,
    seed: u64,
    step: usize,
) -> Result<Batch> {
    if contents.is_empty() || styles.is_empty() {
        return Err(NeatError::invalid("empty image pool"));
    }
    let step_seed = mix_seed(seed, step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let (n_c, n_s) = grid_shape(batch);
    let ci = pick(&mut rng, contents.len(), n_c);
    let si = pick(&mut rng, styles.len(), n_s);
    let cs = ci
        .iter()
        .map(|&i| random_crop(&contents[i], crop, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut sa = Vec::with_capacity(n_s);
    let mut sb = Vec::with_capacity(n_s);
    for &j in &si {
        sa.push(random_crop(&styles[j], crop, &mut rng)?);
        sb.push(random_crop(&styles[j], crop, &mut rng)?);
    }
    Batch::new(cs, sa, sb, mix_seed(step_seed, 0xBA7C))
}
