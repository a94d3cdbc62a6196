use std::collections::BTreeMap;

use super::checkpoint::{CheckpointError, Container, DType};
use crate::diff::{grad_check_against, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::error::{NeatError, Result};

/// Storage precision for learned state. Arithmetic is always 64-bit; in
/// `F32` mode stored values are rounded to single precision after every write.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(NeatError::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    precision: Precision,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            precision,
            params: BTreeMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn rounded(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::F64 => t,
            p => t.map(|v| p.round(v)),
        }
    }

    /// Add a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NeatError::invalid(format!("duplicate parameter `{name}`")));
        }
        let value = self.rounded(value);
        self.params.insert(name, value);
        Ok(())
    }

    /// Replace an existing parameter with a same-shaped value.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self
            .params
            .get(name)
            .ok_or_else(|| NeatError::invalid(format!("unknown parameter `{name}`")))?;
        if old.shape() != value.shape() {
            return Err(NeatError::shape(
                "ParamStore::set",
                format!("`{name}` {:?} vs {:?}", old.shape(), value.shape()),
            ));
        }
        let value = self.rounded(value);
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NeatError::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Append every parameter to `container` under `prefix`.
    pub fn write_into(&self, container: &mut Container, prefix: &str) {
        for (name, t) in &self.params {
            container.push(format!("{prefix}{name}"), self.precision.dtype(), t.clone());
        }
    }

    /// Strict load: every parameter of `self` must be present in `container`
    /// with the same shape, and every container entry not starting with one
    /// of `ignore_prefixes` must be a known parameter.
    pub fn load_strict(&mut self, container: &Container, ignore_prefixes: &[&str]) -> Result<()> {
        for entry in &container.entries {
            if ignore_prefixes.iter().any(|p| entry.name.starts_with(p)) {
                continue;
            }
            if !self.params.contains_key(&entry.name) {
                return Err(CheckpointError::UnknownEntry(entry.name.clone()).into());
            }
        }
        let mut loaded = BTreeMap::new();
        for (name, t) in &self.params {
            let entry = container
                .get(name)
                .ok_or_else(|| CheckpointError::MissingEntry(name.clone()))?;
            if entry.tensor.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: entry.tensor.shape().to_vec(),
                }
                .into());
            }
            loaded.insert(name.clone(), entry.tensor.clone());
        }
        self.params = loaded;
        Ok(())
    }
}

/// Recording context: a tape plus lazily bound parameters.
///
/// Parameters under `enc.` are always bound as constants; others require
/// gradients when the `trainable` predicate accepts their name.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            trainable: Box::new(trainable),
            vars: BTreeMap::new(),
        }
    }

    /// A context in which nothing requires gradients.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Ctx::new(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let grad = !name.starts_with("enc.") && (self.trainable)(name);
        let v = self.tape.leaf(value, grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far that require gradients.
    pub fn bound_trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(_, &v)| self.tape.requires_grad(v))
            .map(|(k, &v)| (k.clone(), v))
            .collect()
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound_trainable()
            .into_iter()
            .map(|(name, v)| (name, grads.get_or_zeros(v)))
            .collect())
    }
}

/// Elementwise `acc += g` over gradient maps.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
}

/// Check reverse-mode gradients of `objective` for the named parameters
/// against central differences. The store must be 64-bit.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    objective: F,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    if store.precision() != Precision::F64 {
        return Err(NeatError::invalid("gradient checks need a 64-bit parameter store"));
    }
    let mut ctx = Ctx::new(store, |n| names.iter().any(|m| m == n));
    let out = objective(&mut ctx)?;
    ctx.tape.check_finite()?;
    let grads = ctx.gradients(out)?;
    let mut analytic = Vec::with_capacity(names.len());
    let mut values = Vec::with_capacity(names.len());
    for name in names {
        let value = store.get(name)?.clone();
        analytic.push(
            grads
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(value.shape())),
        );
        values.push(value);
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut s = store.clone();
        for (name, v) in names.iter().zip(vals) {
            s.set(name, v.clone())?;
        }
        let mut ctx = Ctx::frozen(&s);
        let out = objective(&mut ctx)?;
        ctx.tape.check_finite()?;
        Ok(ctx.tape.value(out).item())
    };
    grad_check_against(eval, &values, &analytic, tolerance, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_mode_rounds_on_write() {
        let mut s = ParamStore::new(Precision::F32);
        s.insert("a", Tensor::from_vec(vec![0.1])).unwrap();
        assert_eq!(s.get("a").unwrap().data()[0], 0.1f32 as f64);
        let mut d = ParamStore::new(Precision::F64);
        d.insert("a", Tensor::from_vec(vec![0.1])).unwrap();
        assert_eq!(d.get("a").unwrap().data()[0], 0.1);
    }

    #[test]
    fn strict_load_names_missing_and_unknown_entries() {
        let mut s = ParamStore::new(Precision::F64);
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("b", Tensor::zeros(&[3])).unwrap();
        let mut c = Container::default();
        c.push("a", DType::F64, Tensor::full(&[2], 1.0));
        let err = s.clone().load_strict(&c, &[]).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");

        c.push("b", DType::F64, Tensor::zeros(&[3]));
        c.push("zzz", DType::F64, Tensor::zeros(&[1]));
        let err = s.clone().load_strict(&c, &[]).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
        s.load_strict(&c, &["zz"]).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn encoder_params_never_require_grad() {
        let mut s = ParamStore::new(Precision::F64);
        s.insert("enc.w", Tensor::zeros(&[1])).unwrap();
        s.insert("dec.w", Tensor::zeros(&[1])).unwrap();
        let mut ctx = Ctx::new(&s, |_| true);
        let e = ctx.param("enc.w").unwrap();
        let d = ctx.param("dec.w").unwrap();
        assert!(!ctx.tape.requires_grad(e));
        assert!(ctx.tape.requires_grad(d));
        assert_eq!(ctx.param("dec.w").unwrap(), d);
    }
}
