use std::collections::BTreeMap;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{NeatError, Result};
use crate::imgproc::{build_prior, sobel_map, ImageTensor, PriorConfig, SobelMap};
use crate::losses::{
    adversarial_d, adversarial_g, content_loss, identity_half, info_nce, patch_cooccurrence, style_loss, total_loss,
    LossReport, LossWeights, PatchSettings, ADVERSARIAL, CONTENT, CONTRAST_CONTENT, CONTRAST_STYLE, IDENTITY,
    PATCH_COMPLEX, PATCH_SIMPLE, STYLE,
};
use crate::nets::{accumulate_grads, arch, group_of, Ctx, FeaturePyramid, Group, Model, PyramidVars};

/// One training batch laid out as a grid: pair `k` combines content
/// `k % n_c` with style `k / n_c`. Every style has a second crop that serves
/// as the "real" sample for the patch discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub contents: Vec<ImageTensor>,
    pub styles: Vec<ImageTensor>,
    pub style_reals: Vec<ImageTensor>,
    /// Drives patch placement and positive sampling.
    pub seed: u64,
}

impl Batch {
    pub fn new(
        contents: Vec<ImageTensor>,
        styles: Vec<ImageTensor>,
        style_reals: Vec<ImageTensor>,
        seed: u64,
    ) -> Result<Self> {
        if contents.is_empty() || styles.is_empty() {
            return Err(NeatError::invalid("batch needs at least one content and one style"));
        }
        if styles.len() != style_reals.len() {
            return Err(NeatError::invalid(format!(
                "{} styles but {} second crops",
                styles.len(),
                style_reals.len()
            )));
        }
        if contents.len() * styles.len() < 2 {
            return Err(NeatError::invalid("batch must hold at least 2 pairs"));
        }
        let dims = (contents[0].height(), contents[0].width());
        for img in contents.iter().chain(&styles).chain(&style_reals) {
            if (img.height(), img.width()) != dims {
                return Err(NeatError::shape(
                    "batch",
                    format!("{}x{} vs {}x{}", img.height(), img.width(), dims.0, dims.1),
                ));
            }
            arch::check_encodable(img.to_tensor().shape())?;
        }
        Ok(Batch {
            contents,
            styles,
            style_reals,
            seed,
        })
    }

    pub fn pairs(&self) -> usize {
        self.contents.len() * self.styles.len()
    }

    /// `(content index, style index)` of pair `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        (k % self.contents.len(), k / self.contents.len())
    }
}

/// Everything a step needs besides parameters and data.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub prior: PriorConfig,
    pub patch: PatchSettings,
    /// Pairs per accumulation chunk; `None` runs the whole batch at once.
    pub subbatch: Option<usize>,
}

/// Generator-side report plus per-group gradients for one batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub report: LossReport,
    pub disc_loss: f64,
    pub generator: BTreeMap<String, Tensor>,
    pub discriminator: BTreeMap<String, Tensor>,
}

/// Splitmix-style derivation of independent streams from one seed.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_STYLE_POS: u64 = 1;
const TAG_CONTENT_POS: u64 = 2;
const TAG_PATCH: u64 = 0x100;

/// Constant inputs shared by every forward pass of a step.
struct Prepared<'b> {
    batch: &'b Batch,
    content_py: Vec<FeaturePyramid>,
    content_sobel: Vec<SobelMap>,
    style_py: Vec<FeaturePyramid>,
    style_sobel: Vec<SobelMap>,
    real_py: Vec<FeaturePyramid>,
    real_sobel: Vec<SobelMap>,
    pair_prior: Vec<(ImageTensor, FeaturePyramid)>,
    content_self: Vec<(ImageTensor, FeaturePyramid)>,
    style_self: Vec<(ImageTensor, FeaturePyramid)>,
}

impl<'b> Prepared<'b> {
    fn new(model: &Model, batch: &'b Batch, prior: &PriorConfig) -> Result<Self> {
        let encode_all = |imgs: &[ImageTensor]| imgs.iter().map(|i| model.encode(i)).collect::<Result<Vec<_>>>();
        let sobel_all = |imgs: &[ImageTensor]| imgs.iter().map(sobel_map).collect::<Result<Vec<_>>>();
        let with_py = |img: ImageTensor| -> Result<(ImageTensor, FeaturePyramid)> {
            let py = model.encode(&img)?;
            Ok((img, py))
        };
        let pair_prior = (0..batch.pairs())
            .map(|k| {
                let (i, j) = batch.pair(k);
                with_py(build_prior(&batch.contents[i], &batch.styles[j], prior)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let self_priors = |imgs: &[ImageTensor]| {
            imgs.iter()
                .map(|c| with_py(build_prior(c, c, prior)?))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Prepared {
            batch,
            content_py: encode_all(&batch.contents)?,
            content_sobel: sobel_all(&batch.contents)?,
            style_py: encode_all(&batch.styles)?,
            style_sobel: sobel_all(&batch.styles)?,
            real_py: encode_all(&batch.style_reals)?,
            real_sobel: sobel_all(&batch.style_reals)?,
            pair_prior,
            content_self: self_priors(&batch.contents)?,
            style_self: self_priors(&batch.styles)?,
        })
    }

    fn style_rows(&self) -> usize {
        self.batch.pairs() + 2 * self.batch.styles.len()
    }

    fn style_groups(&self) -> Vec<usize> {
        let mut g: Vec<usize> = (0..self.batch.pairs()).map(|k| self.batch.pair(k).1).collect();
        g.extend((0..self.batch.styles.len()).flat_map(|j| [j, j]));
        g
    }

    fn content_groups(&self) -> Vec<usize> {
        (0..self.batch.pairs()).map(|k| self.batch.pair(k).0).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Item {
    Pair(usize),
    IdentityContent(usize),
    IdentityStyle(usize),
    /// Ground-truth style crop: `false` for the first crop, `true` for the second.
    StyleCrop(usize, bool),
}

/// Pairs split into `pairs / sub` chunks; auxiliary items dealt round-robin.
fn chunk_items(batch: &Batch, sub: usize) -> Vec<Vec<Item>> {
    let n = batch.pairs() / sub;
    let mut chunks: Vec<Vec<Item>> = (0..n)
        .map(|c| (c * sub..(c + 1) * sub).map(Item::Pair).collect())
        .collect();
    let aux = (0..batch.contents.len())
        .map(Item::IdentityContent)
        .chain((0..batch.styles.len()).map(Item::IdentityStyle))
        .chain((0..batch.styles.len()).flat_map(|j| [Item::StyleCrop(j, false), Item::StyleCrop(j, true)]));
    for (idx, item) in aux.enumerate() {
        chunks[idx % n].push(item);
    }
    chunks
}

#[derive(Default)]
struct Partial {
    /// Weighted separable generator parts.
    gen: Vec<Var>,
    disc: Vec<Var>,
    terms: [f64; 8],
    style_rows: Vec<(usize, Var)>,
    content_rows: Vec<(usize, Var)>,
}

impl Partial {
    fn add(&mut self, tape: &mut Tape, w: &LossWeights, term: usize, v: Var, coef: f64) {
        self.terms[term] += coef * tape.value(v).item();
        let s = tape.scale(v, coef * w.lambda[term]);
        self.gen.push(s);
    }
}

fn consts(ctx: &mut Ctx, py: &FeaturePyramid) -> PyramidVars {
    py.levels.clone().map(|t| ctx.tape.constant(t))
}

/// `clamp(prior + decoder(transform(prior, style)))` recorded on the tape.
fn stylize_on_tape(ctx: &mut Ctx, prior: &(ImageTensor, FeaturePyramid), style_py: &FeaturePyramid) -> Result<Var> {
    let fc = consts(ctx, &prior.1);
    let fs = consts(ctx, style_py);
    let fused = arch::transform(ctx, &fc, &fs)?;
    let p = ctx.tape.constant(prior.0.to_tensor());
    Ok(arch::decode_deltas(ctx, fused, p)?.1)
}

fn sum_all(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let Some(&first) = vs.first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn forward(
    ctx: &mut Ctx,
    model: &Model,
    prep: &Prepared,
    settings: &StepSettings,
    items: &[Item],
    codes_only: bool,
) -> Result<Partial> {
    let w = &settings.weights;
    let batch = prep.batch;
    let mut out = Partial::default();
    let per_pair = 1.0 / batch.pairs() as f64;
    for &item in items {
        match item {
            Item::Pair(k) => {
                let (i, j) = batch.pair(k);
                let isc = stylize_on_tape(ctx, &prep.pair_prior[k], &prep.style_py[j])?;
                let py = arch::encode(ctx, isc)?;
                out.style_rows.push((k, arch::project_style(ctx, &py)?));
                out.content_rows.push((k, arch::project_content(ctx, &py)?));
                if codes_only {
                    continue;
                }
                let target = consts(ctx, &prep.style_py[j]);
                let v = style_loss(&mut ctx.tape, &py, &target)?;
                out.add(&mut ctx.tape, w, STYLE, v, per_pair);

                let c4 = ctx.tape.constant(prep.content_py[i].content_layer().clone());
                let v = content_loss(&mut ctx.tape, py[3], c4)?;
                out.add(&mut ctx.tape, w, CONTENT, v, per_pair);

                let fake = arch::domain_disc(ctx, &model.config, isc)?;
                let v = adversarial_g(&mut ctx.tape, fake);
                out.add(&mut ctx.tape, w, ADVERSARIAL, v, per_pair);

                let patch = patch_cooccurrence(
                    ctx,
                    &model.config,
                    isc,
                    &prep.content_sobel[i],
                    &batch.styles[j],
                    &prep.style_sobel[j],
                    &batch.style_reals[j],
                    &prep.real_sobel[j],
                    &settings.patch,
                    mix_seed(batch.seed, TAG_PATCH + k as u64),
                )?;
                out.add(&mut ctx.tape, w, PATCH_SIMPLE, patch.gen_simple, per_pair);
                out.add(&mut ctx.tape, w, PATCH_COMPLEX, patch.gen_complex, per_pair);

                let real_img = ctx.tape.constant(batch.styles[j].to_tensor());
                let real = arch::domain_disc(ctx, &model.config, real_img)?;
                let detached = ctx.tape.detach(isc);
                let fake_d = arch::domain_disc(ctx, &model.config, detached)?;
                let adv = adversarial_d(&mut ctx.tape, real, fake_d);
                let d = ctx.tape.add(adv, patch.disc)?;
                out.disc.push(ctx.tape.scale(d, per_pair));
            }
            Item::IdentityContent(i) | Item::IdentityStyle(i) => {
                if codes_only {
                    continue;
                }
                let (img, own_py, prior, n) = match item {
                    Item::IdentityContent(_) => (
                        &batch.contents[i],
                        &prep.content_py[i],
                        &prep.content_self[i],
                        batch.contents.len(),
                    ),
                    _ => (&batch.styles[i], &prep.style_py[i], &prep.style_self[i], batch.styles.len()),
                };
                let recon = stylize_on_tape(ctx, prior, own_py)?;
                let py = arch::encode(ctx, recon)?;
                let target = ctx.tape.constant(img.to_tensor());
                let target_py = consts(ctx, own_py);
                let v = identity_half(
                    &mut ctx.tape,
                    recon,
                    target,
                    &py,
                    &target_py,
                    w.identity_pixel,
                    w.identity_feature,
                )?;
                out.add(&mut ctx.tape, w, IDENTITY, v, 1.0 / n as f64);
            }
            Item::StyleCrop(j, second) => {
                let src = if second { &prep.real_py[j] } else { &prep.style_py[j] };
                let py = consts(ctx, src);
                let row = batch.pairs() + 2 * j + usize::from(second);
                out.style_rows.push((row, arch::project_style(ctx, &py)?));
            }
        }
    }
    Ok(out)
}

/// Rows `[1, D]` sorted into a `[K, D]` matrix.
fn stack_rows(tape: &mut Tape, rows: &[(usize, Var)], k: usize) -> Result<Var> {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.0);
    if sorted.len() != k || sorted.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(NeatError::invalid("code bank is incomplete"));
    }
    let vars: Vec<Var> = sorted.into_iter().map(|r| r.1).collect();
    tape.concat(&vars)
}

fn keep_group(grads: BTreeMap<String, Tensor>, group: Group) -> BTreeMap<String, Tensor> {
    grads.into_iter().filter(|(n, _)| group_of(n) == group).collect()
}

fn trainable(name: &str) -> bool {
    group_of(name) != Group::Encoder
}

fn check_grads(grads: &BTreeMap<String, Tensor>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(NeatError::NonFinite(format!("gradient of `{name}`"))),
        None => Ok(()),
    }
}

/// Losses and gradients of one batch, without touching the parameters.
///
/// With a sub-batch size, the two contrastive terms are handled by logit
/// accumulation: codes are first computed for the whole batch without
/// gradients, the coupled loss is differentiated with respect to those codes,
/// and each chunk is then re-run with gradients, its codes contracted with
/// the fixed code gradients. The result matches the direct computation.
pub fn compute_step(model: &Model, batch: &Batch, settings: &StepSettings) -> Result<StepGradients> {
    settings.weights.validate()?;
    let b = batch.pairs();
    let sub = settings.subbatch.unwrap_or(b);
    if sub == 0 || !b.is_multiple_of(sub) {
        return Err(NeatError::invalid(format!(
            "accumulation sub-batch {sub} does not divide the batch of {b} pairs"
        )));
    }
    let prep = Prepared::new(model, batch, &settings.prior)?;
    let w = &settings.weights;
    let (ks, kc) = (prep.style_rows(), b);
    let (gs, gc) = (prep.style_groups(), prep.content_groups());
    let seed_s = mix_seed(batch.seed, TAG_STYLE_POS);
    let seed_c = mix_seed(batch.seed, TAG_CONTENT_POS);

    let mut terms = [0.0; 8];
    let mut disc_loss = 0.0;
    let mut generator = BTreeMap::new();
    let mut discriminator = BTreeMap::new();

    if sub == b {
        let mut ctx = Ctx::new(&model.params, trainable);
        let items = chunk_items(batch, b).remove(0);
        let part = forward(&mut ctx, model, &prep, settings, &items, false)?;
        let bank_s = stack_rows(&mut ctx.tape, &part.style_rows, ks)?;
        let bank_c = stack_rows(&mut ctx.tape, &part.content_rows, kc)?;
        let cs = info_nce(&mut ctx.tape, bank_s, &gs, w.tau, seed_s)?;
        let cc = info_nce(&mut ctx.tape, bank_c, &gc, w.tau, seed_c)?;
        terms = part.terms;
        terms[CONTRAST_STYLE] = ctx.tape.value(cs).item();
        terms[CONTRAST_CONTENT] = ctx.tape.value(cc).item();
        let mut parts = part.gen;
        parts.push(ctx.tape.scale(cs, w.lambda[CONTRAST_STYLE]));
        parts.push(ctx.tape.scale(cc, w.lambda[CONTRAST_CONTENT]));
        let g = sum_all(&mut ctx.tape, &parts)?;
        let d = sum_all(&mut ctx.tape, &part.disc)?;
        disc_loss = ctx.tape.value(d).item();
        generator = keep_group(ctx.gradients(g)?, Group::Generator);
        discriminator = keep_group(ctx.gradients(d)?, Group::Discriminator);
    } else {
        let chunks = chunk_items(batch, sub);
        let dim = model.config.code_dim;
        let mut bank_s = vec![0.0; ks * dim];
        let mut bank_c = vec![0.0; kc * dim];
        for chunk in &chunks {
            let mut ctx = Ctx::frozen(&model.params);
            let part = forward(&mut ctx, model, &prep, settings, chunk, true)?;
            for (rows, bank) in [(&part.style_rows, &mut bank_s), (&part.content_rows, &mut bank_c)] {
                for &(r, v) in rows {
                    bank[r * dim..(r + 1) * dim].copy_from_slice(ctx.tape.value(v).data());
                }
            }
        }
        let mut tape = Tape::new();
        let ls = tape.leaf(Tensor::new(vec![ks, dim], bank_s)?, true);
        let lc = tape.leaf(Tensor::new(vec![kc, dim], bank_c)?, true);
        let cs = info_nce(&mut tape, ls, &gs, w.tau, seed_s)?;
        let cc = info_nce(&mut tape, lc, &gc, w.tau, seed_c)?;
        terms[CONTRAST_STYLE] = tape.value(cs).item();
        terms[CONTRAST_CONTENT] = tape.value(cc).item();
        let a = tape.scale(cs, w.lambda[CONTRAST_STYLE]);
        let c = tape.scale(cc, w.lambda[CONTRAST_CONTENT]);
        let coupled = tape.add(a, c)?;
        let grads = tape.backward(coupled)?;
        let (code_gs, code_gc) = (grads.get_or_zeros(ls), grads.get_or_zeros(lc));

        for chunk in &chunks {
            let mut ctx = Ctx::new(&model.params, trainable);
            let part = forward(&mut ctx, model, &prep, settings, chunk, false)?;
            let mut parts = part.gen;
            for (rows, cg) in [(&part.style_rows, &code_gs), (&part.content_rows, &code_gc)] {
                for &(r, v) in rows {
                    let row = Tensor::new(vec![1, dim], cg.data()[r * dim..(r + 1) * dim].to_vec())?;
                    let g = ctx.tape.constant(row);
                    let m = ctx.tape.mul(v, g)?;
                    parts.push(ctx.tape.sum(m));
                }
            }
            for (t, v) in terms.iter_mut().zip(part.terms) {
                *t += v;
            }
            let g = sum_all(&mut ctx.tape, &parts)?;
            let d = sum_all(&mut ctx.tape, &part.disc)?;
            disc_loss += ctx.tape.value(d).item();
            accumulate_grads(&mut generator, keep_group(ctx.gradients(g)?, Group::Generator));
            accumulate_grads(&mut discriminator, keep_group(ctx.gradients(d)?, Group::Discriminator));
        }
    }

    let report = total_loss(&terms, w, 0)?;
    if !disc_loss.is_finite() {
        return Err(NeatError::NonFinite(format!("discriminator loss = {disc_loss}")));
    }
    check_grads(&generator)?;
    check_grads(&discriminator)?;
    Ok(StepGradients {
        report,
        disc_loss,
        generator,
        discriminator,
    })
}

/// Which projection head a contrastive batch is built on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeHead {
    Style,
    Content,
}

/// InfoNCE value and head-parameter gradients.
#[derive(Clone, Debug)]
pub struct ContrastiveOutcome {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

fn head_code(ctx: &mut Ctx, head: CodeHead, img: &ImageTensor) -> Result<Var> {
    let x = ctx.tape.constant(img.to_tensor());
    let py = arch::encode(ctx, x)?;
    match head {
        CodeHead::Style => arch::project_style(ctx, &py),
        CodeHead::Content => arch::project_content(ctx, &py),
    }
}

fn check_groups(images: &[ImageTensor], groups: &[usize]) -> Result<()> {
    if images.len() != groups.len() || images.is_empty() {
        return Err(NeatError::invalid(format!(
            "{} images with {} group labels",
            images.len(),
            groups.len()
        )));
    }
    Ok(())
}

/// Full-batch contrastive loss with gradients, the reference for
/// [`logit_accumulated_contrastive`].
pub fn contrastive_direct(
    model: &Model,
    images: &[ImageTensor],
    groups: &[usize],
    head: CodeHead,
    tau: f64,
    seed: u64,
) -> Result<ContrastiveOutcome> {
    check_groups(images, groups)?;
    let mut ctx = Ctx::new(&model.params, trainable);
    let rows = images
        .iter()
        .map(|img| head_code(&mut ctx, head, img))
        .collect::<Result<Vec<_>>>()?;
    let bank = ctx.tape.concat(&rows)?;
    let loss = info_nce(&mut ctx.tape, bank, groups, tau, seed)?;
    Ok(ContrastiveOutcome {
        loss: ctx.tape.value(loss).item(),
        grads: ctx.gradients(loss)?,
    })
}

/// The same loss and gradients computed `subbatch` images at a time.
#[allow(clippy::too_many_arguments)]
pub fn logit_accumulated_contrastive(
    model: &Model,
    images: &[ImageTensor],
    groups: &[usize],
    head: CodeHead,
    macro_batch: usize,
    subbatch: usize,
    tau: f64,
    seed: u64,
) -> Result<ContrastiveOutcome> {
    check_groups(images, groups)?;
    if images.len() != macro_batch {
        return Err(NeatError::invalid(format!(
            "macro batch {macro_batch} but {} images",
            images.len()
        )));
    }
    if subbatch == 0 || !macro_batch.is_multiple_of(subbatch) {
        return Err(NeatError::invalid(format!(
            "sub-batch {subbatch} does not divide macro batch {macro_batch}"
        )));
    }
    let dim = model.config.code_dim;
    let mut bank = Vec::with_capacity(macro_batch * dim);
    for chunk in images.chunks(subbatch) {
        let mut ctx = Ctx::frozen(&model.params);
        for img in chunk {
            let v = head_code(&mut ctx, head, img)?;
            bank.extend_from_slice(ctx.tape.value(v).data());
        }
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(vec![macro_batch, dim], bank)?, true);
    let loss = info_nce(&mut tape, leaf, groups, tau, seed)?;
    let code_grad = tape.backward(loss)?.get_or_zeros(leaf);

    let mut grads = BTreeMap::new();
    for (c, chunk) in images.chunks(subbatch).enumerate() {
        let mut ctx = Ctx::new(&model.params, trainable);
        let mut parts = Vec::with_capacity(chunk.len());
        for (o, img) in chunk.iter().enumerate() {
            let r = c * subbatch + o;
            let v = head_code(&mut ctx, head, img)?;
            let g = ctx
                .tape
                .constant(Tensor::new(vec![1, dim], code_grad.data()[r * dim..(r + 1) * dim].to_vec())?);
            let m = ctx.tape.mul(v, g)?;
            parts.push(ctx.tape.sum(m));
        }
        let s = sum_all(&mut ctx.tape, &parts)?;
        accumulate_grads(&mut grads, ctx.gradients(s)?);
    }
    Ok(ContrastiveOutcome {
        loss: tape.value(loss).item(),
        grads,
    })
}
