use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageTensor, SobelMap};
use crate::error::{NeatError, Result};

/// A square crop with its frequency-complexity score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatch {
    pub crop: ImageTensor,
    /// Mean Sobel magnitude over the patch footprint.
    pub score: f64,
    /// Top-left corner `(x, y)` in the source image.
    pub origin: (usize, usize),
    pub source_id: usize,
}

/// Sample `n` uniformly placed `patch_size` squares from `img`, scoring each
/// by the mean of `sobel_source` over the same footprint.
///
/// For stylized images the caller passes the *content* image's Sobel map.
pub fn sample_patches(
    img: &ImageTensor,
    sobel_source: &SobelMap,
    n: usize,
    patch_size: usize,
    seed: u64,
    source_id: usize,
) -> Result<Vec<ScoredPatch>> {
    if patch_size == 0 || patch_size > img.height().min(img.width()) {
        return Err(NeatError::invalid(format!(
            "patch size {patch_size} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    if n < 2 {
        return Err(NeatError::invalid(format!("need at least 2 patches, got {n}")));
    }
    if sobel_source.height != img.height() || sobel_source.width != img.width() {
        return Err(NeatError::shape(
            "sample_patches",
            format!(
                "sobel map {}x{} vs image {}x{}",
                sobel_source.height,
                sobel_source.width,
                img.height(),
                img.width()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..=img.height() - patch_size);
            let x = rng.random_range(0..=img.width() - patch_size);
            Ok(ScoredPatch {
                crop: img.crop(y, x, patch_size, patch_size)?,
                score: sobel_source.window_mean(x, y, patch_size),
                origin: (x, y),
                source_id,
            })
        })
        .collect()
}

/// Stable ascending sort by score; the lower half is "simple", the upper half
/// "complex". Ties keep sampling order.
pub fn sort_split_patches(mut patches: Vec<ScoredPatch>) -> Result<(Vec<ScoredPatch>, Vec<ScoredPatch>)> {
    if !patches.len().is_multiple_of(2) {
        return Err(NeatError::invalid(format!(
            "patch count {} must be even",
            patches.len()
        )));
    }
    patches.sort_by(|a, b| a.score.total_cmp(&b.score));
    let complex = patches.split_off(patches.len() / 2);
    Ok((patches, complex))
}
