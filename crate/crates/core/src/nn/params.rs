use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a forward pass treats parameters and running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, buffer updates (running stats, power iteration),
    /// stochastic conditioning.
    Train,
    /// Running statistics, no buffer writes, deterministic.
    Eval,
    /// Like `Eval`, but parameters are detached so that no gradient reaches
    /// them. Used for the discriminator during the generator step.
    Frozen,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Named trainable parameters plus non-trainable buffers. Names are dotted
/// paths whose first segment is the parameter group (`gen`, `disc`, ...).
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn tensor_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn add_param(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let t = self.tensor_from(values, shape)?;
        self.params.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("duplicate buffer name {name}")));
        }
        let t = self.tensor_from(values, shape)?;
        self.buffers.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    /// Parameter as a tensor for a forward pass in `mode`.
    pub fn get(&self, name: &str, mode: Mode) -> Result<Tensor> {
        let v = self.var(name)?;
        Ok(match mode {
            Mode::Frozen => v.as_tensor().detach(),
            _ => v.as_tensor().clone(),
        })
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        self.buffers
            .get(name)
            .map(|v| v.as_tensor().detach())
            .ok_or_else(|| Error::NotFound(format!("buffer {name}")))
    }

    pub fn set_buffer(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .buffers
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("buffer {name}")))?;
        v.set(&value.detach())?;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    /// Parameters whose group (first dotted segment) equals `group`.
    pub fn group(&self, group: &str) -> Vec<(&String, &Var)> {
        self.params
            .iter()
            .filter(|(n, _)| group_of(n) == group)
            .collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .params
            .keys()
            .map(|n| group_of(n).to_string())
            .collect();
        g.dedup();
        g
    }

    pub fn num_elements(&self, group: &str) -> usize {
        self.group(group).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values of a group's parameters.
    pub fn checksum(&self, group: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.group(group) {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Independent copy (fresh storage) of every parameter and buffer.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            device: self.device.clone(),
            dtype: self.dtype,
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
        })
    }

    /// Overwrite a parameter or buffer in place, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::NotFound(format!("parameter or buffer {name}")))?;
        if v.dims() != value.dims() {
            return Err(Error::shape(name, v.dims(), value.dims()));
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Gaussian with standard deviation `std`.
pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Unit vector with Gaussian direction (power-iteration start).
pub fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Row-major `rows x cols` matrix with orthonormal columns (or rows when
/// `rows < cols`), via QR of a Gaussian matrix.
pub fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let (r, c) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let a = DMatrix::from_vec(r, c, normal(rng, r * c, 1.0));
    let qr = a.qr();
    let mut q = qr.q();
    // Sign fix so the factorization is unique.
    let rd = qr.r();
    for j in 0..c {
        if rd[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}
