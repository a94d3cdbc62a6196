//! Non-differentiable image operations: filtering, Sobel maps, statistical
//! recolouring, content-prior construction, and patch sampling.

mod color;
mod filter;
mod io;
mod patches;
mod prior;

pub use color::{recolor, recolor_unclamped, rgb_moments, RgbMoments};
pub use filter::{bilateral_filter, gaussian_blur, gaussian_kernel, sobel_map};
pub use io::{load_image, save_image};
pub use patches::{sample_patches, sort_split_patches, ScoredPatch};
pub use prior::{build_prior, prior_stages, self_prior, PriorConfig, PriorStages};

use crate::diff::Tensor;
use crate::error::{NeatError, Result};

/// Channel-major raster with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Values are clamped into [0, 1]; non-finite input is rejected.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(NeatError::invalid(format!(
                "empty image {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(NeatError::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NeatError::NonFinite("image data".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    /// Build from a `[C,H,W]` tensor, clamping into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => ImageTensor::new(c, h, w, t.data().to_vec()),
            _ => Err(NeatError::shape("image", format!("expected [C,H,W], got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image dimensions are consistent")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn require_rgb(&self, op: &str) -> Result<()> {
        if self.channels != 3 {
            return Err(NeatError::invalid(format!(
                "{op} needs an RGB image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    /// Single-channel luminance (0.299 R + 0.587 G + 0.114 B); grayscale passes through.
    pub fn luminance(&self) -> Result<ImageTensor> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = (0..self.pixel_count())
                    .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                    .collect();
                ImageTensor::new(1, self.height, self.width, data)
            }
            c => Err(NeatError::invalid(format!("luminance of a {c}-channel image"))),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(NeatError::invalid(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let base = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[base + left..base + left + w]);
            }
        }
        Ok(ImageTensor {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Swap the spatial axes.
    pub fn transpose(&self) -> ImageTensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    data[(c * w + x) * h + y] = self.data[(c * h + y) * w + x];
                }
            }
        }
        ImageTensor {
            channels: self.channels,
            height: w,
            width: h,
            data,
        }
    }

    /// Multiply every value by `k` (clamped back into range).
    pub fn scaled(&self, k: f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v * k).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 {
            return Err(NeatError::invalid("resize to an empty size"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |o: usize, scale: f64, n: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in 0..height {
                let (y0, y1, fy) = axis(y, sy, self.height);
                for &(x0, x1, fx) in &xs {
                    let top = p[y0 * self.width + x0] * (1.0 - fx) + p[y0 * self.width + x1] * fx;
                    let bot = p[y1 * self.width + x0] * (1.0 - fx) + p[y1 * self.width + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        ImageTensor::new(self.channels, height, width, data)
    }

    /// Nearest-neighbour replication by an integer factor.
    pub fn upscale_nearest(&self, factor: usize) -> ImageTensor {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.get(c, y / factor, x / factor));
                }
            }
        }
        ImageTensor {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-pixel gradient magnitude, single channel, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SobelMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Mean over the `size×size` window with top-left `(x, y)`.
    pub fn window_mean(&self, x: usize, y: usize, size: usize) -> f64 {
        let mut total = 0.0;
        for yy in y..y + size {
            total += self.data[yy * self.width + x..yy * self.width + x + size].iter().sum::<f64>();
        }
        total / (size * size) as f64
    }

    pub fn transpose(&self) -> SobelMap {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                data[x * self.height + y] = self.data[y * self.width + x];
            }
        }
        SobelMap {
            height: self.width,
            width: self.height,
            data,
        }
    }
}
