//! Learnable components and their checkpoint format.
//!
//! Parameter naming: `enc.*` frozen encoder, `tf.*` attention transform,
//! `dec.*` delta decoder, `dd.*` domain discriminator, `pds.*`/`pdc.*` simple
//! and complex patch discriminators, `ls.*`/`lc.*` style and content heads.
//! Conv weights are `[out, in, k, k]`, linear weights `[in, out]`.

pub mod arch;
pub mod checkpoint;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use arch::{PatchKind, PyramidVars, TRANSFORM_BLOCKS};
pub use checkpoint::{CheckpointError, Container, DType};
pub use params::{accumulate_grads, grad_check_params, Ctx, ParamStore, Precision};

use crate::diff::Tensor;
use crate::error::{NeatError, Result};
use crate::imgproc::ImageTensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Encoder width `c`; levels have `c, 2c, 4c, 8c` channels.
    pub base_width: usize,
    pub code_dim: usize,
    pub head_hidden: usize,
    pub disc_width: usize,
    pub patch_width: usize,
    pub patch_hidden: usize,
    pub leaky_slope: f64,
    /// Start the last decoder layer at zero so the output equals the prior.
    pub zero_init_deltas: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_width: 16,
            code_dim: 64,
            head_hidden: 128,
            disc_width: 16,
            patch_width: 16,
            patch_hidden: 64,
            leaky_slope: 0.2,
            zero_init_deltas: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// A very small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        NetConfig {
            base_width: 2,
            code_dim: 4,
            head_hidden: 6,
            disc_width: 2,
            patch_width: 2,
            patch_hidden: 4,
            ..NetConfig::default()
        }
    }

    /// Channels of the fused transform features.
    pub fn fused_width(&self) -> usize {
        8 * self.base_width
    }

    fn validate(&self) -> Result<()> {
        let widths = [
            self.base_width,
            self.code_dim,
            self.head_hidden,
            self.disc_width,
            self.patch_width,
            self.patch_hidden,
        ];
        if widths.contains(&0) {
            return Err(NeatError::Config("network widths must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(NeatError::Config(format!(
                "leaky slope {} must be in [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    fn to_meta(&self, c: &mut Container) {
        let pairs = [
            ("net.base_width", self.base_width.to_string()),
            ("net.code_dim", self.code_dim.to_string()),
            ("net.head_hidden", self.head_hidden.to_string()),
            ("net.disc_width", self.disc_width.to_string()),
            ("net.patch_width", self.patch_width.to_string()),
            ("net.patch_hidden", self.patch_hidden.to_string()),
            ("net.leaky_slope", self.leaky_slope.to_string()),
            ("net.zero_init_deltas", self.zero_init_deltas.to_string()),
            ("net.seed", self.seed.to_string()),
        ];
        for (k, v) in pairs {
            c.meta.insert(k.to_string(), v);
        }
    }

    fn from_meta(c: &Container) -> Result<Self> {
        fn get<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
            let raw = c
                .meta
                .get(key)
                .ok_or_else(|| NeatError::from(CheckpointError::MalformedHeader(format!("missing meta `{key}`"))))?;
            raw.parse().map_err(|_| {
                CheckpointError::MalformedHeader(format!("meta `{key}` has bad value `{raw}`")).into()
            })
        }
        Ok(NetConfig {
            base_width: get(c, "net.base_width")?,
            code_dim: get(c, "net.code_dim")?,
            head_hidden: get(c, "net.head_hidden")?,
            disc_width: get(c, "net.disc_width")?,
            patch_width: get(c, "net.patch_width")?,
            patch_hidden: get(c, "net.patch_hidden")?,
            leaky_slope: get(c, "net.leaky_slope")?,
            zero_init_deltas: get(c, "net.zero_init_deltas")?,
            seed: get(c, "net.seed")?,
        })
    }
}

/// Per-level encoder activations at strides 1, 2, 4, 8.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    /// The deepest level, used by the content loss.
    pub fn content_layer(&self) -> &Tensor {
        &self.levels[3]
    }
}

/// Parameter groups updated by separate optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Generator,
    Discriminator,
}

pub fn group_of(name: &str) -> Group {
    match name.split('.').next().unwrap_or("") {
        "enc" => Group::Encoder,
        "dd" | "pds" | "pdc" => Group::Discriminator,
        _ => Group::Generator,
    }
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl Model {
    /// Fresh parameters from `config.seed`: He-normal weights, zero biases
    /// except in the encoder.
    pub fn new(config: NetConfig, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(precision);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let c = config.base_width;
        let d = config.fused_width();
        let conv = |store: &mut ParamStore, init: &mut Init, name: &str, ci: usize, co: usize, k: usize| -> Result<()> {
            let fan_in = (ci * k * k) as f64;
            store.insert(format!("{name}.w"), init.normal(&[co, ci, k, k], (2.0 / fan_in).sqrt()))?;
            let b = if name.starts_with("enc.") {
                init.normal(&[co], 0.1)
            } else {
                Tensor::zeros(&[co])
            };
            store.insert(format!("{name}.b"), b)
        };

        conv(&mut store, &mut init, "enc.s1.c1", 3, c, 3)?;
        conv(&mut store, &mut init, "enc.s1.c2", c, c, 3)?;
        for s in 2..=4 {
            let (prev, next) = (c << (s - 2), c << (s - 1));
            conv(&mut store, &mut init, &format!("enc.s{s}.down"), prev, next, 3)?;
            conv(&mut store, &mut init, &format!("enc.s{s}.c1"), next, next, 3)?;
            conv(&mut store, &mut init, &format!("enc.s{s}.c2"), next, next, 3)?;
        }

        conv(&mut store, &mut init, "tf.fuse", 15 * c, d, 1)?;
        for b in 0..TRANSFORM_BLOCKS {
            for p in ["q", "k", "v", "o"] {
                conv(&mut store, &mut init, &format!("tf.b{b}.{p}"), d, d, 1)?;
            }
        }

        conv(&mut store, &mut init, "dec.c1", d, 4 * c, 3)?;
        conv(&mut store, &mut init, "dec.c2", 4 * c, 2 * c, 3)?;
        conv(&mut store, &mut init, "dec.c3", 2 * c, c, 3)?;
        conv(&mut store, &mut init, "dec.c4", c, c, 3)?;
        conv(&mut store, &mut init, "dec.out", c, 3, 3)?;
        if config.zero_init_deltas {
            store.set("dec.out.w", Tensor::zeros(&[3, c, 3, 3]))?;
        }

        let w = config.disc_width;
        conv(&mut store, &mut init, "dd.c1", 3, w, 3)?;
        conv(&mut store, &mut init, "dd.c2", w, 2 * w, 3)?;
        conv(&mut store, &mut init, "dd.c3", 2 * w, 4 * w, 3)?;
        conv(&mut store, &mut init, "dd.out", 4 * w, 1, 1)?;

        let pw = config.patch_width;
        for kind in [PatchKind::Simple, PatchKind::Complex] {
            let p = kind.prefix();
            conv(&mut store, &mut init, &format!("{p}.c1"), 3, pw, 3)?;
            conv(&mut store, &mut init, &format!("{p}.c2"), pw, 2 * pw, 3)?;
            conv(&mut store, &mut init, &format!("{p}.c3"), 2 * pw, 4 * pw, 3)?;
            linear_init(&mut store, &mut init, &format!("{p}.fc1"), 8 * pw, config.patch_hidden)?;
            linear_init(&mut store, &mut init, &format!("{p}.fc2"), config.patch_hidden, 1)?;
        }

        linear_init(&mut store, &mut init, "ls.fc1", 30 * c, config.head_hidden)?;
        linear_init(&mut store, &mut init, "ls.fc2", config.head_hidden, config.code_dim)?;
        linear_init(&mut store, &mut init, "lc.fc1", 8 * c, config.head_hidden)?;
        linear_init(&mut store, &mut init, "lc.fc2", config.head_hidden, config.code_dim)?;

        Ok(Model { config, params: store })
    }

    /// Names of every parameter in `group`.
    pub fn group_names(&self, group: Group) -> Vec<String> {
        self.params
            .names()
            .filter(|n| group_of(n) == group)
            .map(str::to_string)
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        self.config.to_meta(&mut c);
        c.meta
            .insert("precision".into(), self.params.precision().as_str().into());
        self.params.write_into(&mut c, "");
        c
    }

    /// Strictly load a model, ignoring optimizer entries (`opt.` prefix).
    pub fn from_container(c: &Container) -> Result<Self> {
        let config = NetConfig::from_meta(c)?;
        let precision = match c.meta.get("precision") {
            Some(p) => Precision::parse(p)?,
            None => Precision::F32,
        };
        let mut model = Model::new(config, precision)?;
        model.params.load_strict(c, &["opt."])?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_container(&Container::load(path)?)
    }

    /// Replace the encoder with externally converted weights. `c` must hold
    /// exactly the `enc.*` entries with matching shapes.
    pub fn load_encoder(&mut self, c: &Container) -> Result<()> {
        let mut enc = ParamStore::new(self.params.precision());
        for name in self.group_names(Group::Encoder) {
            enc.insert(name.clone(), self.params.get(&name)?.clone())?;
        }
        enc.load_strict(c, &[])?;
        for (name, t) in enc.iter() {
            self.params.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<FeaturePyramid> {
        let mut ctx = Ctx::frozen(&self.params);
        let x = ctx.tape.constant(img.to_tensor());
        let py = arch::encode(&mut ctx, x)?;
        Ok(FeaturePyramid {
            levels: py.map(|v| ctx.tape.value(v).clone()),
        })
    }

    /// Fused features at 1/8 resolution.
    pub fn transform(&self, fc: &FeaturePyramid, fs: &FeaturePyramid) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(&self.params);
        let a = fc.levels.clone().map(|t| ctx.tape.constant(t));
        let b = fs.levels.clone().map(|t| ctx.tape.constant(t));
        let f = arch::transform(&mut ctx, &a, &b)?;
        Ok(ctx.tape.value(f).clone())
    }

    /// `(delta, clamp(prior + delta))`.
    pub fn decode_deltas(&self, fused: &Tensor, prior: &ImageTensor) -> Result<(Tensor, ImageTensor)> {
        let mut ctx = Ctx::frozen(&self.params);
        let f = ctx.tape.constant(fused.clone());
        let p = ctx.tape.constant(prior.to_tensor());
        let (delta, out) = arch::decode_deltas(&mut ctx, f, p)?;
        let img = ImageTensor::from_tensor(ctx.tape.value(out))?;
        Ok((ctx.tape.value(delta).clone(), img))
    }

    pub fn domain_disc(&self, img: &ImageTensor) -> Result<Tensor> {
        let mut ctx = Ctx::frozen(&self.params);
        let x = ctx.tape.constant(img.to_tensor());
        let out = arch::domain_disc(&mut ctx, &self.config, x)?;
        Ok(ctx.tape.value(out).clone())
    }

    pub fn patch_disc(&self, kind: PatchKind, patch: &ImageTensor, refs: &[ImageTensor]) -> Result<f64> {
        let mut ctx = Ctx::frozen(&self.params);
        let x = ctx.tape.constant(patch.to_tensor());
        let rs: Vec<_> = refs.iter().map(|r| ctx.tape.constant(r.to_tensor())).collect();
        let out = arch::patch_disc(&mut ctx, &self.config, kind, x, &rs)?;
        Ok(ctx.tape.value(out).item())
    }

    pub fn project_style(&self, py: &FeaturePyramid) -> Result<Vec<f64>> {
        self.project(py, arch::project_style)
    }

    pub fn project_content(&self, py: &FeaturePyramid) -> Result<Vec<f64>> {
        self.project(py, arch::project_content)
    }

    fn project(
        &self,
        py: &FeaturePyramid,
        f: fn(&mut Ctx, &PyramidVars) -> Result<crate::diff::Var>,
    ) -> Result<Vec<f64>> {
        let mut ctx = Ctx::frozen(&self.params);
        let vars = py.levels.clone().map(|t| ctx.tape.constant(t));
        let out = f(&mut ctx, &vars)?;
        Ok(ctx.tape.value(out).data().to_vec())
    }
}

fn linear_init(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        init.normal(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt()),
    )?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

#[cfg(test)]
mod tests;
