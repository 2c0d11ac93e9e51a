use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Tensor};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of named parameters, with bias correction. Moments
/// are kept on the host in f64 and the update runs as one fused pass.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    names: Vec<String>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

fn host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

impl Adam {
    pub fn new(config: AdamConfig, ps: &ParamStore, names: Vec<String>) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for n in &names {
            let len = ps.var(n)?.elem_count();
            m.insert(n.clone(), vec![0.0; len]);
            v.insert(n.clone(), vec![0.0; len]);
        }
        Ok(Self {
            config,
            names,
            m,
            v,
            step: 0,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Gradients of this optimizer's parameters from a backward pass.
    pub fn collect(&self, ps: &ParamStore, store: &GradStore) -> Result<Grads> {
        let mut out = Grads::new();
        for n in &self.names {
            if let Some(g) = store.get(ps.var(n)?) {
                out.insert(n.clone(), g.clone());
            }
        }
        Ok(out)
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, ps: &ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for n in &self.names {
            let Some(g) = grads.get(n) else { continue };
            let var = ps.var(n)?;
            if g.dims() != var.dims() {
                return Err(Error::shape(
                    format!("gradient of {n}"),
                    var.dims(),
                    g.dims(),
                ));
            }
            let g = host(g)?;
            let mut p = host(var.as_tensor())?;
            let m = self.m.get_mut(n).expect("moment exists for every name");
            let v = self.v.get_mut(n).expect("moment exists for every name");
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
            let t = Tensor::from_vec(p, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, named `m.<param>` and `v.<param>`,
    /// in the parameter dtype.
    pub fn state_tensors(&self, ps: &ParamStore) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for n in &self.names {
            let var = ps.var(n)?;
            for (prefix, slot) in [("m", &self.m), ("v", &self.v)] {
                let t = Tensor::from_vec(slot[n].clone(), var.shape(), var.device())?
                    .to_dtype(var.dtype())?;
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        Ok(out)
    }

    pub fn load_state(
        &mut self,
        ps: &ParamStore,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for n in &self.names {
            for (prefix, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{n}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::NotFound(format!("optimizer state {key}")))?;
                let want = ps.var(n)?.dims().to_vec();
                if t.dims() != want.as_slice() {
                    return Err(Error::shape(key, &want, t.dims()));
                }
                slot.insert(n.clone(), host(t)?);
            }
        }
        self.step = step;
        Ok(())
    }
}

pub fn global_norm(grads: &Grads) -> Result<f64> {
    let mut s = 0.0;
    for g in grads.values() {
        s += g
            .sqr()?
            .sum_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok(s.sqrt())
}

/// Rescale so that the global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// `acc += add`, inserting missing entries.
pub fn accumulate(acc: &mut Grads, add: Grads) -> Result<()> {
    for (k, g) in add {
        let g = g.detach();
        match acc.remove(&k) {
            Some(prev) => acc.insert(k, (prev + g)?),
            None => acc.insert(k, g),
        };
    }
    Ok(())
}
