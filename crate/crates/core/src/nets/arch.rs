//! Recorded forward passes of every sub-network.

use super::params::Ctx;
use super::NetConfig;
use crate::diff::{Padding, Var, STD_EPS};
use crate::error::{NeatError, Result};

/// Number of attention blocks in the transform.
pub const TRANSFORM_BLOCKS: usize = 4;

/// Encoder activations at strides 1, 2, 4 and 8.
pub type PyramidVars = [Var; 4];

pub(crate) fn conv(ctx: &mut Ctx, x: Var, name: &str, stride: usize, padding: Padding) -> Result<Var> {
    let w = ctx.param(&format!("{name}.w"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    ctx.tape.conv2d(x, w, Some(b), stride, padding)
}

/// `x · W + b` for a row-matrix `x`.
pub(crate) fn linear(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let w = ctx.param(&format!("{name}.w"))?;
    let b = ctx.param(&format!("{name}.b"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add_bias(y, b)
}

fn conv_relu(ctx: &mut Ctx, x: Var, name: &str, stride: usize) -> Result<Var> {
    let y = conv(ctx, x, name, stride, Padding::Reflect)?;
    Ok(ctx.tape.relu(y))
}

pub fn check_encodable(shape: &[usize]) -> Result<()> {
    match *shape {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 && h >= 8 && w >= 8 => Ok(()),
        _ => Err(NeatError::invalid(format!(
            "encoder input must be [3, H, W] with H and W positive multiples of 8, got {shape:?}"
        ))),
    }
}

/// Frozen feature encoder.
pub fn encode(ctx: &mut Ctx, x: Var) -> Result<PyramidVars> {
    check_encodable(ctx.tape.shape(x))?;
    let mut h = conv_relu(ctx, x, "enc.s1.c1", 1)?;
    h = conv_relu(ctx, h, "enc.s1.c2", 1)?;
    let l1 = h;
    let mut levels = [l1; 4];
    for (i, level) in levels.iter_mut().enumerate().skip(1) {
        let s = i + 1;
        h = conv_relu(ctx, h, &format!("enc.s{s}.down"), 2)?;
        h = conv_relu(ctx, h, &format!("enc.s{s}.c1"), 1)?;
        h = conv_relu(ctx, h, &format!("enc.s{s}.c2"), 1)?;
        *level = h;
    }
    Ok(levels)
}

/// Pool the shallower levels to the deepest resolution and mix with a 1×1 conv.
fn fuse_levels(ctx: &mut Ctx, py: &PyramidVars) -> Result<Var> {
    let p1 = ctx.tape.avg_pool(py[0], 8)?;
    let p2 = ctx.tape.avg_pool(py[1], 4)?;
    let p3 = ctx.tape.avg_pool(py[2], 2)?;
    let stacked = ctx.tape.concat(&[p1, p2, p3, py[3]])?;
    conv(ctx, stacked, "tf.fuse", 1, Padding::Zero)
}

fn flatten(ctx: &mut Ctx, x: Var) -> Result<(Var, [usize; 3])> {
    let s = ctx.tape.shape(x).to_vec();
    let [c, h, w] = s[..] else {
        return Err(NeatError::shape("flatten", format!("{s:?}")));
    };
    Ok((ctx.tape.reshape(x, &[c, h * w])?, [c, h, w]))
}

/// Residual cross-attention of content features onto style features.
pub fn transform(ctx: &mut Ctx, fc: &PyramidVars, fs: &PyramidVars) -> Result<Var> {
    for i in 0..4 {
        let (a, b) = (ctx.tape.shape(fc[i]).to_vec(), ctx.tape.shape(fs[i]).to_vec());
        if a[0] != b[0] {
            return Err(NeatError::invalid(format!(
                "pyramid level {} has {} content channels but {} style channels",
                i + 1,
                a[0],
                b[0]
            )));
        }
    }
    let mut f = fuse_levels(ctx, fc)?;
    let s = fuse_levels(ctx, fs)?;
    let s_norm = ctx.tape.instance_norm(s, STD_EPS)?;
    for blk in 0..TRANSFORM_BLOCKS {
        let p = format!("tf.b{blk}");
        let f_norm = ctx.tape.instance_norm(f, STD_EPS)?;
        let q = conv(ctx, f_norm, &format!("{p}.q"), 1, Padding::Zero)?;
        let k = conv(ctx, s_norm, &format!("{p}.k"), 1, Padding::Zero)?;
        let v = conv(ctx, s, &format!("{p}.v"), 1, Padding::Zero)?;
        let (q, shape) = flatten(ctx, q)?;
        let (k, _) = flatten(ctx, k)?;
        let (v, _) = flatten(ctx, v)?;
        let qt = ctx.tape.transpose(q)?;
        let logits = ctx.tape.matmul(qt, k)?;
        let logits = ctx.tape.scale(logits, 1.0 / (shape[0] as f64).sqrt());
        let attn = ctx.tape.softmax(logits, 1)?;
        let attn_t = ctx.tape.transpose(attn)?;
        let mixed = ctx.tape.matmul(v, attn_t)?;
        let mixed = ctx.tape.reshape(mixed, &shape)?;
        let out = conv(ctx, mixed, &format!("{p}.o"), 1, Padding::Zero)?;
        f = ctx.tape.add(f, out)?;
    }
    Ok(f)
}

/// Decode fused features into bounded RGB deltas and apply them to `prior`.
/// Returns `(delta, stylized)`.
pub fn decode_deltas(ctx: &mut Ctx, fused: Var, prior: Var) -> Result<(Var, Var)> {
    let fs = ctx.tape.shape(fused).to_vec();
    let ps = ctx.tape.shape(prior).to_vec();
    if fs.len() != 3 || ps.len() != 3 || ps[0] != 3 || fs[1] * 8 != ps[1] || fs[2] * 8 != ps[2] {
        return Err(NeatError::invalid(format!(
            "fused features {fs:?} do not match prior {ps:?} at 1/8 resolution"
        )));
    }
    let mut h = conv_relu(ctx, fused, "dec.c1", 1)?;
    for name in ["dec.c2", "dec.c3", "dec.c4"] {
        h = ctx.tape.upsample2x(h)?;
        h = conv_relu(ctx, h, name, 1)?;
    }
    let raw = conv(ctx, h, "dec.out", 1, Padding::Reflect)?;
    let delta = ctx.tape.tanh(raw);
    let sum = ctx.tape.add(prior, delta)?;
    Ok((delta, ctx.tape.clamp(sum, 0.0, 1.0)))
}

fn conv_leaky(ctx: &mut Ctx, cfg: &NetConfig, x: Var, name: &str) -> Result<Var> {
    let y = conv(ctx, x, name, 2, Padding::Zero)?;
    Ok(ctx.tape.leaky_relu(y, cfg.leaky_slope))
}

/// Fully convolutional real/fake classifier; returns a logit map.
pub fn domain_disc(ctx: &mut Ctx, cfg: &NetConfig, img: Var) -> Result<Var> {
    let mut h = img;
    for name in ["dd.c1", "dd.c2", "dd.c3"] {
        h = conv_leaky(ctx, cfg, h, name)?;
    }
    conv(ctx, h, "dd.out", 1, Padding::Zero)
}

/// Which patch co-occurrence discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Simple,
    Complex,
}

impl PatchKind {
    pub fn prefix(self) -> &'static str {
        match self {
            PatchKind::Simple => "pds",
            PatchKind::Complex => "pdc",
        }
    }
}

/// Patch code: three strided convs then a spatial mean, as a `[4w]` vector.
pub fn patch_code(ctx: &mut Ctx, cfg: &NetConfig, kind: PatchKind, patch: Var) -> Result<Var> {
    let p = kind.prefix();
    let mut h = patch;
    for i in 1..=3 {
        h = conv_leaky(ctx, cfg, h, &format!("{p}.c{i}"))?;
    }
    ctx.tape.channel_mean(h)
}

/// Mean of precomputed reference codes, a `[4w]` vector.
pub fn mean_code(ctx: &mut Ctx, codes: &[Var]) -> Result<Var> {
    if codes.is_empty() {
        return Err(NeatError::invalid("patch discriminator needs at least one reference"));
    }
    let mut acc = codes[0];
    for &c in &codes[1..] {
        acc = ctx.tape.add(acc, c)?;
    }
    Ok(ctx.tape.scale(acc, 1.0 / codes.len() as f64))
}

/// Scalar logit for a candidate code against an aggregated reference code.
pub fn patch_logit(ctx: &mut Ctx, cfg: &NetConfig, kind: PatchKind, candidate: Var, refs_mean: Var) -> Result<Var> {
    let p = kind.prefix();
    let joint = ctx.tape.concat(&[candidate, refs_mean])?;
    let n = ctx.tape.shape(joint)[0];
    let row = ctx.tape.reshape(joint, &[1, n])?;
    let h = linear(ctx, row, &format!("{p}.fc1"))?;
    let h = ctx.tape.leaky_relu(h, cfg.leaky_slope);
    let out = linear(ctx, h, &format!("{p}.fc2"))?;
    ctx.tape.reshape(out, &[1])
}

/// Full patch discriminator on raw patches.
pub fn patch_disc(ctx: &mut Ctx, cfg: &NetConfig, kind: PatchKind, patch: Var, refs: &[Var]) -> Result<Var> {
    if refs.is_empty() {
        return Err(NeatError::invalid("patch discriminator needs at least one reference"));
    }
    let cand = patch_code(ctx, cfg, kind, patch)?;
    let codes = refs
        .iter()
        .map(|&r| patch_code(ctx, cfg, kind, r))
        .collect::<Result<Vec<_>>>()?;
    let m = mean_code(ctx, &codes)?;
    patch_logit(ctx, cfg, kind, cand, m)
}

fn head(ctx: &mut Ctx, input: Var, prefix: &str) -> Result<Var> {
    let n = ctx.tape.shape(input)[0];
    let row = ctx.tape.reshape(input, &[1, n])?;
    let h = linear(ctx, row, &format!("{prefix}.fc1"))?;
    let h = ctx.tape.relu(h);
    let out = linear(ctx, h, &format!("{prefix}.fc2"))?;
    ctx.tape.l2_normalize_rows(out)
}

/// Unit-norm style code `[1, D]` from per-level channel means and deviations.
pub fn project_style(ctx: &mut Ctx, py: &PyramidVars) -> Result<Var> {
    let mut parts = Vec::with_capacity(8);
    for &level in py {
        parts.push(ctx.tape.channel_mean(level)?);
        parts.push(ctx.tape.channel_std(level, STD_EPS)?);
    }
    let stats = ctx.tape.concat(&parts)?;
    head(ctx, stats, "ls")
}

/// Unit-norm content code `[1, D]` from the average-pooled deepest level.
pub fn project_content(ctx: &mut Ctx, py: &PyramidVars) -> Result<Var> {
    let pooled = ctx.tape.channel_mean(py[3])?;
    head(ctx, pooled, "lc")
}
