use super::{bilateral_filter, gaussian_blur, recolor, ImageTensor};
use crate::error::{NeatError, Result};

/// Content-prior preprocessing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub bilateral_diameter: usize,
    /// Shared by the range term (in 0–255 units) and the spatial term (pixels).
    pub bilateral_sigma: f64,
    pub prior_weight: f64,
    pub blur_enabled: bool,
    pub recolor_eps: f64,
}

impl PriorConfig {
    /// Sigma used for a given blur kernel size.
    pub fn sigma_for_kernel(kernel: usize) -> f64 {
        0.15 * kernel as f64 + 0.35
    }

    pub fn with_blur_kernel(mut self, kernel: usize) -> Self {
        self.blur_kernel = kernel;
        self.blur_sigma = Self::sigma_for_kernel(kernel);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(NeatError::invalid(format!(
                "blur_kernel {} must be odd and >= 1",
                self.blur_kernel
            )));
        }
        if self.bilateral_diameter.is_multiple_of(2) {
            return Err(NeatError::invalid(format!(
                "bilateral_diameter {} must be odd",
                self.bilateral_diameter
            )));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight <= 1.0) {
            return Err(NeatError::invalid(format!(
                "prior_weight {} must be in (0, 1]",
                self.prior_weight
            )));
        }
        if !(self.blur_sigma > 0.0) || !(self.bilateral_sigma > 0.0) || !(self.recolor_eps > 0.0) {
            return Err(NeatError::invalid("prior sigmas and eps must be positive"));
        }
        Ok(())
    }

    pub(crate) fn bilateral(&self, img: &ImageTensor) -> Result<ImageTensor> {
        bilateral_filter(
            img,
            self.bilateral_diameter,
            self.bilateral_sigma / 255.0,
            self.bilateral_sigma,
        )
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            blur_kernel: 7,
            blur_sigma: PriorConfig::sigma_for_kernel(7),
            bilateral_diameter: 25,
            bilateral_sigma: 100.0,
            prior_weight: 0.5,
            blur_enabled: true,
            recolor_eps: 1e-5,
        }
    }
}

/// Every intermediate of the prior pipeline, for inspection.
#[derive(Clone, Debug)]
pub struct PriorStages {
    pub blurred: Option<ImageTensor>,
    pub filtered: ImageTensor,
    pub recolored: ImageTensor,
    pub weighted: ImageTensor,
}

fn simplify(content: &ImageTensor, cfg: &PriorConfig) -> Result<(Option<ImageTensor>, ImageTensor)> {
    cfg.validate()?;
    content.require_rgb("build_prior")?;
    let blurred = if cfg.blur_enabled {
        Some(gaussian_blur(content, cfg.blur_kernel, cfg.blur_sigma)?)
    } else {
        None
    };
    let filtered = cfg.bilateral(blurred.as_ref().unwrap_or(content))?;
    Ok((blurred, filtered))
}

/// blur (optional) → bilateral → recolour to `style` → scale by the prior weight.
pub fn prior_stages(content: &ImageTensor, style: &ImageTensor, cfg: &PriorConfig) -> Result<PriorStages> {
    let (blurred, filtered) = simplify(content, cfg)?;
    let recolored = recolor(&filtered, style, cfg.recolor_eps)?;
    let weighted = recolored.scaled(cfg.prior_weight);
    Ok(PriorStages {
        blurred,
        filtered,
        recolored,
        weighted,
    })
}

/// The weighted prior: network input and base for the RGB deltas.
pub fn build_prior(content: &ImageTensor, style: &ImageTensor, cfg: &PriorConfig) -> Result<ImageTensor> {
    Ok(prior_stages(content, style, cfg)?.weighted)
}

/// The prior without recolouring, used as the reconstruction endpoint.
pub fn self_prior(content: &ImageTensor, cfg: &PriorConfig) -> Result<ImageTensor> {
    let (_, filtered) = simplify(content, cfg)?;
    Ok(filtered.scaled(cfg.prior_weight))
}
