use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::ImageTensor;
use crate::error::{NeatError, Result};

/// Mean RGB vector and 3×3 population covariance of an image's pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgbMoments {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

pub fn rgb_moments(img: &ImageTensor) -> Result<RgbMoments> {
    img.require_rgb("rgb_moments")?;
    let n = img.pixel_count() as f64;
    let planes = [img.plane(0), img.plane(1), img.plane(2)];
    let mean = Vector3::from_fn(|c, _| planes[c].iter().sum::<f64>() / n);
    let mut cov = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let s: f64 = planes[i]
                .iter()
                .zip(planes[j])
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .sum();
            cov[(i, j)] = s / n;
            cov[(j, i)] = s / n;
        }
    }
    Ok(RgbMoments { mean, cov })
}

/// `f(M)` for symmetric `M` via eigendecomposition, eigenvalues clamped at 0.
fn sym_apply(m: Matrix3<f64>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(m);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| f(l.max(0.0))));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Affine colour transfer matching the content's RGB mean and covariance to
/// the style's, before clamping. Returns channel-major values.
pub fn recolor_unclamped(content: &ImageTensor, style: &ImageTensor, eps: f64) -> Result<Vec<f64>> {
    content.require_rgb("recolor")?;
    style.require_rgb("recolor")?;
    if !(eps > 0.0) {
        return Err(NeatError::invalid(format!("recolor eps {eps} must be positive")));
    }
    let mc = rgb_moments(content)?;
    let ms = rgb_moments(style)?;
    let reg = Matrix3::identity() * eps;
    let style_sqrt = sym_apply(ms.cov + reg, f64::sqrt);
    let content_isqrt = sym_apply(mc.cov + reg, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    let a = style_sqrt * content_isqrt;

    let n = content.pixel_count();
    let planes = [content.plane(0), content.plane(1), content.plane(2)];
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let x = Vector3::new(planes[0][i], planes[1][i], planes[2][i]) - mc.mean;
        let y = a * x + ms.mean;
        for c in 0..3 {
            out[c * n + i] = y[c];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NeatError::NonFinite("recolor output".into()));
    }
    Ok(out)
}

/// Recolour `content` with the colour statistics of `style`.
pub fn recolor(content: &ImageTensor, style: &ImageTensor, eps: f64) -> Result<ImageTensor> {
    let raw = recolor_unclamped(content, style, eps)?;
    ImageTensor::new(3, content.height(), content.width(), raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    /// Moments recomputed from raw (unclamped) output values.
    fn raw_moments(raw: &[f64], n: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let mean = Vector3::from_fn(|c, _| raw[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64);
        let cov = Matrix3::from_fn(|i, j| {
            (0..n)
                .map(|k| (raw[i * n + k] - mean[i]) * (raw[j * n + k] - mean[j]))
                .sum::<f64>()
                / n as f64
        });
        (mean, cov)
    }

    #[test]
    fn same_image_is_a_fixed_point() {
        let img = random_image(1, 16, 16);
        let raw = recolor_unclamped(&img, &img, 1e-5).unwrap();
        for (a, b) in raw.iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn random_pair_matches_style_moments() {
        let c = random_image(2, 32, 32);
        // A style with correlated, shifted colours.
        let base = random_image(3, 32, 32);
        let n = 32 * 32;
        let mut sd = vec![0.0; 3 * n];
        for i in 0..n {
            let (r, g) = (base.plane(0)[i], base.plane(1)[i]);
            sd[i] = 0.2 + 0.5 * r;
            sd[n + i] = 0.1 + 0.3 * r + 0.2 * g;
            sd[2 * n + i] = 0.6 - 0.2 * g;
        }
        let s = ImageTensor::new(3, 32, 32, sd).unwrap();
        let raw = recolor_unclamped(&c, &s, 1e-5).unwrap();
        let (mean, cov) = raw_moments(&raw, n);
        let ms = rgb_moments(&s).unwrap();
        assert!((mean - ms.mean).abs().max() < 1e-3);
        assert!((cov - ms.cov).abs().max() < 1e-2);
    }

    #[test]
    fn constant_content_maps_to_style_mean() {
        let c = ImageTensor::filled(3, 16, 16, 0.5);
        let s = random_image(4, 16, 16);
        let out = recolor(&c, &s, 1e-5).unwrap();
        let ms = rgb_moments(&s).unwrap();
        for ch in 0..3 {
            assert!(out.plane(ch).iter().all(|v| (v - ms.mean[ch]).abs() < 1e-12));
        }
    }
}
