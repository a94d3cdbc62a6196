use rayon::prelude::*;

use super::{ImageTensor, SobelMap};
use crate::diff::conv::reflect_index;
use crate::error::{NeatError, Result};

/// Normalised 1-D Gaussian taps of odd length `kernel`.
pub fn gaussian_kernel(kernel: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel.is_multiple_of(2) {
        return Err(NeatError::invalid(format!("blur kernel {kernel} must be odd")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(NeatError::invalid(format!("blur sigma {sigma} must be positive")));
    }
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageTensor, kernel: usize, sigma: f64) -> Result<ImageTensor> {
    let taps = gaussian_kernel(kernel, sigma)?;
    let r = (kernel / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.data().len());
    let mut tmp = vec![0.0; h * w];
    for c in 0..img.channels() {
        let p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * p[y * w + reflect_index(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    taps.iter()
                        .enumerate()
                        .map(|(k, t)| t * tmp[reflect_index(y as isize + k as isize - r, h) * w + x])
                        .sum(),
                );
            }
        }
    }
    ImageTensor::new(img.channels(), h, w, out)
}

/// Edge-preserving bilateral filter over a circular window of `diameter`.
///
/// `sigma_color` is in the image's [0, 1] value units; colour distance is the
/// Euclidean norm across channels. `sigma_space` is in pixels.
pub fn bilateral_filter(
    img: &ImageTensor,
    diameter: usize,
    sigma_color: f64,
    sigma_space: f64,
) -> Result<ImageTensor> {
    if diameter.is_multiple_of(2) {
        return Err(NeatError::invalid(format!("bilateral diameter {diameter} must be odd")));
    }
    if !(sigma_color > 0.0) || !(sigma_space > 0.0) {
        return Err(NeatError::invalid(format!(
            "bilateral sigmas must be positive (color {sigma_color}, space {sigma_space})"
        )));
    }
    let r = (diameter / 2) as isize;
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                let ws = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_space * sigma_space)).exp();
                offsets.push((dy, dx, ws));
            }
        }
    }
    let color_coef = -1.0 / (2.0 * sigma_color * sigma_color);
    let linear: Vec<(isize, f64)> = offsets.iter().map(|&(dy, dx, ws)| (dy * w as isize + dx, ws)).collect();
    let planes: Vec<&[f64]> = (0..c).map(|ch| img.plane(ch)).collect();
    // Pixel-major result, rows processed independently.
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * c];
            let mut acc = vec![0.0; c];
            let interior_row = c == 3 && y as isize >= r && (y as isize) < h as isize - r;
            for x in 0..w {
                let centre = y * w + x;
                if interior_row && x as isize >= r && (x as isize) < w as isize - r {
                    let px = bilateral_rgb_interior(&planes, centre, &linear, color_coef);
                    row[x * 3..x * 3 + 3].copy_from_slice(&px);
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut norm = 0.0;
                for &(dy, dx, ws) in &offsets {
                    let q = reflect_index(y as isize + dy, h) * w + reflect_index(x as isize + dx, w);
                    let d2: f64 = planes.iter().map(|p| (p[q] - p[centre]).powi(2)).sum();
                    let wt = ws * (d2 * color_coef).exp();
                    norm += wt;
                    for (a, p) in acc.iter_mut().zip(&planes) {
                        *a += wt * p[q];
                    }
                }
                for ch in 0..c {
                    row[x * c + ch] = acc[ch] / norm;
                }
            }
            row
        })
        .collect();
    let mut out = vec![0.0; c * h * w];
    for (y, row) in rows.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = row[x * c + ch];
            }
        }
    }
    ImageTensor::new(c, h, w, out)
}

/// Same arithmetic as the general path for an RGB pixel whose whole window
/// lies inside the image, without reflection or per-channel dispatch.
#[inline]
fn bilateral_rgb_interior(planes: &[&[f64]], centre: usize, linear: &[(isize, f64)], color_coef: f64) -> [f64; 3] {
    let (p0, p1, p2) = (planes[0], planes[1], planes[2]);
    let (c0, c1, c2) = (p0[centre], p1[centre], p2[centre]);
    let mut acc = [0.0; 3];
    let mut norm = 0.0;
    for &(off, ws) in linear {
        let q = (centre as isize + off) as usize;
        let (v0, v1, v2) = (p0[q], p1[q], p2[q]);
        let d2 = 0.0 + (v0 - c0).powi(2) + (v1 - c1).powi(2) + (v2 - c2).powi(2);
        let wt = ws * (d2 * color_coef).exp();
        norm += wt;
        acc[0] += wt * v0;
        acc[1] += wt * v1;
        acc[2] += wt * v2;
    }
    acc.map(|a| a / norm)
}

/// Gradient magnitude of the luminance under the 3×3 Sobel operator.
pub fn sobel_map(img: &ImageTensor) -> Result<SobelMap> {
    let lum = img.luminance()?;
    let (h, w) = (lum.height(), lum.width());
    let p = lum.plane(0);
    let at = |y: isize, x: isize| p[reflect_index(y, h) * w + reflect_index(x, w)];
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            data.push((gx * gx + gy * gy).sqrt());
        }
    }
    Ok(SobelMap {
        height: h,
        width: w,
        data,
    })
}
