//! Evaluation metrics and the timing harness.
//!
//! `content_proxy` is a feature-space stand-in for a learned perceptual
//! metric and `sifid` uses this crate's own encoder, so neither is
//! comparable with numbers produced by other feature extractors.

mod bench;

pub use bench::{bench, median_seconds, BenchOptions, BenchReport, DEFAULT_RESOLUTIONS};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{Tensor, STD_EPS};
use crate::error::{NeatError, Result};
use crate::imgproc::ImageTensor;
use crate::nets::Model;

fn rgb_points(img: &ImageTensor, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    img.require_rgb("chamfer")?;
    let n = img.pixel_count();
    let point = |i: usize| [0, 1, 2].map(|c| img.plane(c)[i] * 255.0);
    Ok(match limit {
        Some(k) if n > k => sample(rng, n, k).into_iter().map(point).collect(),
        _ => (0..n).map(point).collect(),
    })
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let total: f64 = from
        .par_iter()
        .map(|a| {
            to.iter()
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric squared Chamfer distance between the RGB point sets of two
/// images, in 0–255 units and normalized by point count. With `sample`, each
/// set larger than that is subsampled uniformly without replacement.
pub fn chamfer_color(a: &ImageTensor, b: &ImageTensor, sample: Option<usize>, seed: u64) -> Result<f64> {
    if sample == Some(0) {
        return Err(NeatError::invalid("chamfer sample size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pa = rgb_points(a, sample, &mut rng)?;
    let pb = rgb_points(b, sample, &mut rng)?;
    Ok(mean_nearest(&pa, &pb) + mean_nearest(&pb, &pa))
}

/// Mean and unbiased covariance of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Statistics of a `[C, H, W]` map, treating each position as a sample.
    pub fn from_feature_map(t: &Tensor) -> Result<Self> {
        let [c, h, w] = *t.shape() else {
            return Err(NeatError::shape("feature stats", format!("expected [C,H,W], got {:?}", t.shape())));
        };
        let n = h * w;
        if n < 2 {
            return Err(NeatError::invalid(format!(
                "feature map has {n} spatial position(s); at least 2 are needed"
            )));
        }
        // Column j is position j.
        let x = DMatrix::from_row_slice(c, n, t.data());
        let mean = x.column_mean();
        let centered = DMatrix::from_fn(c, n, |i, j| x[(i, j)] - mean[i]);
        let cov = (&centered * centered.transpose()) / (n as f64 - 1.0);
        Ok(FeatureStats { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`. The trace of the root is taken
/// from the eigenvalues of the symmetrized `√Σa Σb √Σa`, negatives clamped.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(NeatError::shape(
            "frechet distance",
            format!("{} vs {} dimensions", a.mean.len(), b.mean.len()),
        ));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov);
    let m = &ra * &b.cov * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_root).max(0.0))
}

/// Single-image Fréchet distance on the stride-2 encoder level.
pub fn sifid(model: &Model, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let fa = FeatureStats::from_feature_map(&model.encode(&fit8(a)?)?.levels[1])?;
    let fb = FeatureStats::from_feature_map(&model.encode(&fit8(b)?)?.levels[1])?;
    frechet_distance(&fa, &fb)
}

fn fit8(img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (img.height() / 8 * 8, img.width() / 8 * 8);
    if h < 8 || w < 8 {
        return Err(NeatError::invalid(format!(
            "image {}x{} is smaller than 8x8",
            img.height(),
            img.width()
        )));
    }
    img.resize_bilinear(h, w)
}

/// Per-position unit-normalized channel vectors of a `[C, H, W]` map.
fn unit_positions(t: &Tensor) -> Vec<f64> {
    let [c, h, w] = *t.shape() else { unreachable!("encoder levels are [C,H,W]") };
    let n = h * w;
    let d = t.data();
    let mut out = d.to_vec();
    for p in 0..n {
        let norm = (0..c).map(|k| d[k * n + p].powi(2)).sum::<f64>().sqrt() + STD_EPS;
        for k in 0..c {
            out[k * n + p] /= norm;
        }
    }
    out
}

/// Content-preservation proxy: for every encoder level, the mean over
/// positions of the squared distance between unit-normalized feature
/// vectors, averaged over levels. Zero for identical images. This is not a
/// learned perceptual metric.
pub fn content_proxy(model: &Model, content: &ImageTensor, stylized: &ImageTensor) -> Result<f64> {
    let a = fit8(content)?;
    let b = fit8(stylized)?.resize_bilinear(a.height(), a.width())?;
    let (pa, pb) = (model.encode(&a)?, model.encode(&b)?);
    let mut total = 0.0;
    for (x, y) in pa.levels.iter().zip(&pb.levels) {
        let positions = (x.shape()[1] * x.shape()[2]) as f64;
        let (ux, uy) = (unit_positions(x), unit_positions(y));
        total += ux.iter().zip(&uy).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / positions;
    }
    Ok(total / pa.levels.len() as f64)
}

/// Metrics of one stylized result.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub label: String,
    /// Colour distance between the stylized image and the style image.
    pub chamfer: f64,
    pub sifid: f64,
    pub content_proxy: f64,
}

/// Computes all three metrics for `stylized` against its inputs.
pub fn evaluate_pair(
    model: &Model,
    label: impl Into<String>,
    content: &ImageTensor,
    style: &ImageTensor,
    stylized: &ImageTensor,
    chamfer_sample: Option<usize>,
    seed: u64,
) -> Result<PairMetrics> {
    Ok(PairMetrics {
        label: label.into(),
        chamfer: chamfer_color(stylized, style, chamfer_sample, seed)?,
        sifid: sifid(model, stylized, style)?,
        content_proxy: content_proxy(model, content, stylized)?,
    })
}

/// Per-pair metrics with their arithmetic means.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
}

impl MetricReport {
    /// `(chamfer, sifid, content_proxy)` means; `None` when empty.
    pub fn means(&self) -> Option<(f64, f64, f64)> {
        if self.pairs.is_empty() {
            return None;
        }
        let n = self.pairs.len() as f64;
        let sum = self.pairs.iter().fold((0.0, 0.0, 0.0), |acc, p| {
            (acc.0 + p.chamfer, acc.1 + p.sifid, acc.2 + p.content_proxy)
        });
        Some((sum.0 / n, sum.1 / n, sum.2 / n))
    }

    /// One row per pair followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,chamfer,sifid,content_proxy\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{},{}\n", csv_field(&p.label), p.chamfer, p.sifid, p.content_proxy));
        }
        if let Some((c, f, l)) = self.means() {
            s.push_str(&format!("mean,{c},{f},{l}\n"));
        }
        s
    }

    /// Aligned text table of the means, lower is better in every column.
    pub fn to_table(&self, method: &str) -> String {
        let header = ["Method", "Content proxy", "SIFID", "Chamfer"];
        let row = match self.means() {
            Some((c, f, l)) => vec![method.to_string(), format!("{l:.4}"), format!("{f:.4}"), format!("{c:.2}")],
            None => vec![method.to_string(), "-".into(), "-".into(), "-".into()],
        };
        aligned_table(&header.map(String::from), &[row])
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut s = line(header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in rows {
        s.push_str(&line(r));
    }
    s
}

#[cfg(test)]
mod tests;
