//! The training objective: eight terms and their weighted sum.

mod contrastive;
mod patch;

pub use contrastive::{info_nce, info_nce_codes, sample_positives};
pub use patch::{patch_cooccurrence, PatchSettings, PatchTerms};

use crate::diff::{Tape, Var, STD_EPS};
use crate::error::{NeatError, Result};
use crate::nets::FeaturePyramid;

/// Term order used by reports, weights and CSV columns.
pub const TERM_NAMES: [&str; 8] = [
    "style",
    "adversarial",
    "content",
    "identity",
    "contrast_style",
    "contrast_content",
    "patch_simple",
    "patch_complex",
];

pub const STYLE: usize = 0;
pub const ADVERSARIAL: usize = 1;
pub const CONTENT: usize = 2;
pub const IDENTITY: usize = 3;
pub const CONTRAST_STYLE: usize = 4;
pub const CONTRAST_CONTENT: usize = 5;
pub const PATCH_SIMPLE: usize = 6;
pub const PATCH_COMPLEX: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// λ1..λ8 in [`TERM_NAMES`] order.
    pub lambda: [f64; 8],
    pub identity_pixel: f64,
    pub identity_feature: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [1.0, 1.0, 1.0, 1.0, 0.3, 0.3, 0.25, 0.75],
            identity_pixel: 50.0,
            identity_feature: 1.0,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, &l) in TERM_NAMES.iter().zip(&self.lambda) {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(NeatError::Config(format!("weight for `{name}` must be >= 0, got {l}")));
            }
        }
        if !(self.identity_pixel >= 0.0 && self.identity_feature >= 0.0) {
            return Err(NeatError::Config("identity sub-weights must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(NeatError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            lambda: self.lambda.map(|l| l * k),
            ..self.clone()
        }
    }
}

/// Unweighted terms plus their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub terms: [f64; 8],
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> String {
        format!("step,{},total", TERM_NAMES.join(","))
    }

    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.terms.iter().chain(std::iter::once(&self.total)) {
            s.push(',');
            s.push_str(&format!("{v:e}"));
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || NeatError::invalid(format!("malformed loss row `{line}`"));
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 10 {
            return Err(bad());
        }
        let step = parts[0].parse().map_err(|_| bad())?;
        let mut vals = [0.0; 9];
        for (v, p) in vals.iter_mut().zip(&parts[1..]) {
            *v = p.parse().map_err(|_| bad())?;
        }
        let mut terms = [0.0; 8];
        terms.copy_from_slice(&vals[..8]);
        Ok(LossReport {
            step,
            terms,
            total: vals[8],
        })
    }
}

/// Weighted sum of the eight terms. A non-finite term is an error naming it.
pub fn total_loss(terms: &[f64; 8], weights: &LossWeights, step: usize) -> Result<LossReport> {
    for (name, &t) in TERM_NAMES.iter().zip(terms) {
        if !t.is_finite() {
            return Err(NeatError::NonFinite(format!("loss term `{name}` = {t}")));
        }
    }
    let total = terms.iter().zip(&weights.lambda).map(|(t, l)| t * l).sum();
    Ok(LossReport {
        step,
        terms: *terms,
        total,
    })
}

fn check_levels(op: &str, a: &[Var], b: &[Var]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NeatError::invalid(format!(
            "{op}: pyramids have {} and {} levels",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `Σ_levels ‖Δμ‖₂ + ‖Δσ‖₂` over per-channel spatial statistics.
pub fn style_loss(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    check_levels("style loss", a, b)?;
    let mut parts = Vec::with_capacity(2 * a.len());
    for (&x, &y) in a.iter().zip(b) {
        let (mx, my) = (tape.channel_mean(x)?, tape.channel_mean(y)?);
        let (sx, sy) = (tape.channel_std(x, STD_EPS)?, tape.channel_std(y, STD_EPS)?);
        let dm = tape.sub(mx, my)?;
        let ds = tape.sub(sx, sy)?;
        parts.push(tape.l2_norm(dm));
        parts.push(tape.l2_norm(ds));
    }
    sum_vars(tape, &parts)
}

/// `‖a − b‖₂` on the content level.
pub fn content_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.l2_norm(d))
}

/// One half of the identity loss: `w_pixel·‖x − y‖₂ + w_feature·Σ_i ‖φi(x) − φi(y)‖₂`.
pub fn identity_half(
    tape: &mut Tape,
    recon: Var,
    target: Var,
    recon_py: &[Var],
    target_py: &[Var],
    w_pixel: f64,
    w_feature: f64,
) -> Result<Var> {
    check_levels("identity loss", recon_py, target_py)?;
    let d = tape.sub(recon, target)?;
    let pix = tape.l2_norm(d);
    let mut feats = Vec::with_capacity(recon_py.len());
    for (&x, &y) in recon_py.iter().zip(target_py) {
        let d = tape.sub(x, y)?;
        feats.push(tape.l2_norm(d));
    }
    let feat = sum_vars(tape, &feats)?;
    let a = tape.scale(pix, w_pixel);
    let b = tape.scale(feat, w_feature);
    tape.add(a, b)
}

/// Discriminator loss `softplus(−z_real) + softplus(z_fake)` on mean logits,
/// i.e. `−log p(real) − log(1 − p(fake))` with `p = sigmoid(z)`.
pub fn adversarial_d(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Var {
    let zr = tape.mean(real_logits);
    let zf = tape.mean(fake_logits);
    let nr = tape.scale(zr, -1.0);
    let a = tape.softplus(nr);
    let b = tape.softplus(zf);
    tape.add(a, b).expect("scalars")
}

/// Non-saturating generator loss `−log p(fake)`.
pub fn adversarial_g(tape: &mut Tape, fake_logits: Var) -> Var {
    let z = tape.mean(fake_logits);
    let n = tape.scale(z, -1.0);
    tape.softplus(n)
}

fn pyramid_vars(tape: &mut Tape, py: &FeaturePyramid) -> [Var; 4] {
    py.levels.clone().map(|t| tape.constant(t))
}

/// Style loss between two precomputed pyramids.
pub fn style_loss_value(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    let mut tape = Tape::new();
    let va = pyramid_vars(&mut tape, a);
    let vb = pyramid_vars(&mut tape, b);
    let out = style_loss(&mut tape, &va, &vb)?;
    Ok(tape.value(out).item())
}

/// Content loss between two precomputed pyramids.
pub fn content_loss_value(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(a.content_layer().clone());
    let y = tape.constant(b.content_layer().clone());
    let out = content_loss(&mut tape, x, y)?;
    Ok(tape.value(out).item())
}

/// Full identity loss from images and their pyramids.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss_value(
    icc: &crate::ImageTensor,
    ic: &crate::ImageTensor,
    iss: &crate::ImageTensor,
    is: &crate::ImageTensor,
    py: [&FeaturePyramid; 4],
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = [icc, ic, iss, is]
        .iter()
        .map(|im| tape.constant(im.to_tensor()))
        .collect();
    let pys: Vec<[Var; 4]> = py.iter().map(|p| pyramid_vars(&mut tape, p)).collect();
    let a = identity_half(
        &mut tape,
        vars[0],
        vars[1],
        &pys[0],
        &pys[1],
        weights.identity_pixel,
        weights.identity_feature,
    )?;
    let b = identity_half(
        &mut tape,
        vars[2],
        vars[3],
        &pys[2],
        &pys[3],
        weights.identity_pixel,
        weights.identity_feature,
    )?;
    let out = tape.add(a, b)?;
    Ok(tape.value(out).item())
}

/// `(L_D, L_G)` from mean real and fake logits.
pub fn adversarial_values(real_mean_logit: f64, fake_mean_logit: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let r = tape.constant(crate::diff::Tensor::scalar(real_mean_logit));
    let f = tape.constant(crate::diff::Tensor::scalar(fake_mean_logit));
    let d = adversarial_d(&mut tape, r, f);
    let g = adversarial_g(&mut tape, f);
    (tape.value(d).item(), tape.value(g).item())
}
