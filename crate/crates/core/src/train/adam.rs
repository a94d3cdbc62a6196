use std::collections::BTreeMap;

use crate::diff::Tensor;
use crate::error::{NeatError, Result};
use crate::nets::{Container, ParamStore, Precision};

/// Adaptive-moment optimizer over a named subset of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// New values for every parameter in `grads`. Nothing is written until
    /// the caller commits them, so a failed step leaves the store untouched.
    pub fn propose(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<Vec<(String, Tensor)>> {
        let prec = store.precision();
        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut out = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.shape() != g.shape() {
                return Err(NeatError::shape(
                    "adam",
                    format!("`{name}` {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let mut next = p.clone();
            for (((x, mi), vi), &gi) in next
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = prec.round(self.beta1 * *mi + (1.0 - self.beta1) * gi);
                *vi = prec.round(self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            out.push((name.clone(), next));
        }
        self.t = t;
        Ok(out)
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str, precision: Precision) {
        for (name, m) in &self.m {
            c.push(format!("{prefix}m.{name}"), precision.dtype(), m.clone());
        }
        for (name, v) in &self.v {
            c.push(format!("{prefix}v.{name}"), precision.dtype(), v.clone());
        }
        c.push(
            format!("{prefix}t"),
            crate::nets::DType::F64,
            Tensor::scalar(self.t as f64),
        );
    }

    pub fn read_from(c: &Container, prefix: &str, lr: f64) -> Result<Self> {
        let mut opt = Adam::new(lr);
        let t = c
            .get(&format!("{prefix}t"))
            .ok_or_else(|| NeatError::Config(format!("checkpoint lacks optimizer state `{prefix}t`")))?;
        opt.t = t.tensor.item() as u64;
        for e in &c.entries {
            if let Some(name) = e.name.strip_prefix(&format!("{prefix}m.")) {
                opt.m.insert(name.to_string(), e.tensor.clone());
            } else if let Some(name) = e.name.strip_prefix(&format!("{prefix}v.")) {
                opt.v.insert(name.to_string(), e.tensor.clone());
            }
        }
        if opt.m.len() != opt.v.len() || opt.m.keys().ne(opt.v.keys()) {
            return Err(NeatError::Config(format!("optimizer state `{prefix}` has unpaired moments")));
        }
        Ok(opt)
    }
}
