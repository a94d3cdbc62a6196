use crate::diff::Var;
use crate::error::{NeatError, Result};
use crate::imgproc::{sample_patches, sort_split_patches, ImageTensor, ScoredPatch, SobelMap};
use crate::nets::arch::{mean_code, patch_code, patch_logit};
use crate::nets::{Ctx, NetConfig, PatchKind};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSettings {
    /// Patches sampled per image; split evenly into simple and complex.
    pub count: usize,
    pub size: usize,
}

impl Default for PatchSettings {
    fn default() -> Self {
        PatchSettings { count: 8, size: 32 }
    }
}

/// Outputs of the dual patch co-occurrence loss for one stylized image.
pub struct PatchTerms {
    /// Mean `−log sigmoid(logit)` of stylized simple patches.
    pub gen_simple: Var,
    pub gen_complex: Var,
    /// Discriminator BCE summed over both discriminators, on detached inputs.
    pub disc: Var,
    /// Content-Sobel scores of the stylized patches routed to each discriminator.
    pub simple_scores: Vec<f64>,
    pub complex_scores: Vec<f64>,
    /// Logit values, `[simple, complex]`, for diagnostics.
    pub fake_logits: [Vec<f64>; 2],
    pub real_logits: [Vec<f64>; 2],
}

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn mean_softplus(ctx: &mut Ctx, logits: &[Var], sign: f64) -> Result<Var> {
    let stacked = ctx.tape.concat(logits)?;
    let s = ctx.tape.scale(stacked, sign);
    let sp = ctx.tape.softplus(s);
    Ok(ctx.tape.mean(sp))
}

/// Dual patch co-occurrence loss.
///
/// Stylized patches are scored by the *content* Sobel map, style patches by
/// their own. After sorting, the simple halves go to the simple
/// discriminator (candidates from `isc`, references from `style`) and the
/// complex halves to the complex one. Real candidates for the
/// discriminators come from `style_real`, a second crop of the style image.
#[allow(clippy::too_many_arguments)]
pub fn patch_cooccurrence(
    ctx: &mut Ctx,
    cfg: &NetConfig,
    isc: Var,
    content_sobel: &SobelMap,
    style: &ImageTensor,
    style_sobel: &SobelMap,
    style_real: &ImageTensor,
    style_real_sobel: &SobelMap,
    settings: &PatchSettings,
    seed: u64,
) -> Result<PatchTerms> {
    if settings.count < 2 || !settings.count.is_multiple_of(2) {
        return Err(NeatError::invalid(format!(
            "patch count {} must be even and at least 2",
            settings.count
        )));
    }
    let isc_img = ImageTensor::from_tensor(ctx.tape.value(isc))?;
    let (n, size) = (settings.count, settings.size);
    let fake = sort_split_patches(sample_patches(&isc_img, content_sobel, n, size, stream(seed, 0), 0)?)?;
    let refs = sort_split_patches(sample_patches(style, style_sobel, n, size, stream(seed, 1), 1)?)?;
    let real = sort_split_patches(sample_patches(style_real, style_real_sobel, n, size, stream(seed, 2), 2)?)?;
    let isc_det = ctx.tape.detach(isc);

    let mut gen = Vec::with_capacity(2);
    let mut disc = Vec::with_capacity(2);
    let mut fake_logits: [Vec<f64>; 2] = Default::default();
    let mut real_logits: [Vec<f64>; 2] = Default::default();
    let halves = [
        (PatchKind::Simple, &fake.0, &refs.0, &real.0),
        (PatchKind::Complex, &fake.1, &refs.1, &real.1),
    ];
    for (slot, (kind, fakes, refs, reals)) in halves.into_iter().enumerate() {
        let const_code = |ctx: &mut Ctx, p: &ScoredPatch| -> Result<Var> {
            let v = ctx.tape.constant(p.crop.to_tensor());
            patch_code(ctx, cfg, kind, v)
        };
        let ref_codes = refs.iter().map(|p| const_code(ctx, p)).collect::<Result<Vec<_>>>()?;
        let ref_mean = mean_code(ctx, &ref_codes)?;

        let mut g_logits = Vec::with_capacity(fakes.len());
        let mut d_fake = Vec::with_capacity(fakes.len());
        for p in fakes {
            let (x, y) = p.origin;
            for (src, out) in [(isc, &mut g_logits), (isc_det, &mut d_fake)] {
                let crop = ctx.tape.crop(src, y, x, size, size)?;
                let code = patch_code(ctx, cfg, kind, crop)?;
                out.push(patch_logit(ctx, cfg, kind, code, ref_mean)?);
            }
        }
        let d_real = reals
            .iter()
            .map(|p| {
                let code = const_code(ctx, p)?;
                patch_logit(ctx, cfg, kind, code, ref_mean)
            })
            .collect::<Result<Vec<_>>>()?;

        fake_logits[slot] = d_fake.iter().map(|&v| ctx.tape.value(v).item()).collect();
        real_logits[slot] = d_real.iter().map(|&v| ctx.tape.value(v).item()).collect();
        gen.push(mean_softplus(ctx, &g_logits, -1.0)?);
        let f = mean_softplus(ctx, &d_fake, 1.0)?;
        let r = mean_softplus(ctx, &d_real, -1.0)?;
        disc.push(ctx.tape.add(f, r)?);
    }
    let disc_total = ctx.tape.add(disc[0], disc[1])?;
    Ok(PatchTerms {
        gen_simple: gen[0],
        gen_complex: gen[1],
        disc: disc_total,
        simple_scores: fake.0.iter().map(|p| p.score).collect(),
        complex_scores: fake.1.iter().map(|p| p.score).collect(),
        fake_logits,
        real_logits,
    })
}
