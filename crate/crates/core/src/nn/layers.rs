use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, batch_normalize, channel_affine, channel_moments};
use super::params::{normal, unit_vector, Mode, ParamStore};
use crate::error::Result;

pub const SN_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-5;

/// Power-iteration state for one weight matrix: left and right singular
/// vector estimates as column vectors.
#[derive(Debug, Clone)]
pub struct SnState {
    pub u: Tensor,
    pub v: Tensor,
}

impl SnState {
    pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dtype: DType) -> Result<Self> {
        let dev = candle_core::Device::Cpu;
        Ok(Self {
            u: Tensor::from_vec(unit_vector(rng, rows), (rows, 1), &dev)?.to_dtype(dtype)?,
            v: Tensor::from_vec(unit_vector(rng, cols), (cols, 1), &dev)?.to_dtype(dtype)?,
        })
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_all()?.sqrt()?.maximum(SN_EPS)?;
    Ok(x.broadcast_div(&n)?)
}

/// One power-iteration step on the 2-D matrix `w` (no gradient).
pub fn power_iteration(w: &Tensor, state: &SnState) -> Result<SnState> {
    let w = w.detach();
    let v = l2_normalize(&w.t()?.matmul(&state.u)?)?;
    let u = l2_normalize(&w.matmul(&v)?)?;
    Ok(SnState { u, v })
}

/// Estimated top singular value `u^T W v`, clamped below by [`SN_EPS`].
/// Differentiable with respect to `w`; `u`, `v` are treated as constants.
pub fn sigma_estimate(w: &Tensor, state: &SnState) -> Result<Tensor> {
    let s = state.u.t()?.matmul(&w.matmul(&state.v)?)?.reshape(())?;
    Ok(s.maximum(SN_EPS)?)
}

/// One power-iteration step followed by division by the estimated spectral
/// norm. `w` must already be 2-D (output dim x rest).
pub fn spectral_normalize(w: &Tensor, state: &SnState) -> Result<(Tensor, SnState)> {
    let next = power_iteration(w, state)?;
    let sigma = sigma_estimate(w, &next)?;
    Ok((w.broadcast_div(&sigma)?, next))
}

/// Registers SN buffers for a weight whose 2-D view is `rows x cols`.
fn add_sn_buffers(
    ps: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    ps.add_buffer(&format!("{name}.sn_u"), unit_vector(rng, rows), &[rows, 1])?;
    ps.add_buffer(&format!("{name}.sn_v"), unit_vector(rng, cols), &[cols, 1])?;
    Ok(())
}

/// Power-iteration steps run at construction, so that an untrained layer in
/// eval mode already divides by a converged estimate.
const SN_WARM_START: usize = 50;

fn warm_start_sn(ps: &ParamStore, name: &str, w2: &Tensor) -> Result<()> {
    let (un, vn) = (format!("{name}.sn_u"), format!("{name}.sn_v"));
    let mut state = SnState {
        u: ps.buffer(&un)?,
        v: ps.buffer(&vn)?,
    };
    for _ in 0..SN_WARM_START {
        state = power_iteration(w2, &state)?;
    }
    ps.set_buffer(&un, &state.u)?;
    ps.set_buffer(&vn, &state.v)
}

/// Weight divided by its estimated spectral norm. In training mode the
/// power-iteration vectors advance by one step and are stored back.
fn sn_weight(ps: &ParamStore, name: &str, w2: &Tensor, mode: Mode) -> Result<Tensor> {
    let (un, vn) = (format!("{name}.sn_u"), format!("{name}.sn_v"));
    let state = SnState {
        u: ps.buffer(&un)?,
        v: ps.buffer(&vn)?,
    };
    let state = if mode.is_train() {
        let next = power_iteration(w2, &state)?;
        ps.set_buffer(&un, &next.u)?;
        ps.set_buffer(&vn, &next.v)?;
        next
    } else {
        state
    };
    let sigma = sigma_estimate(w2, &state)?;
    Ok(w2.broadcast_div(&sigma)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub sn: bool,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        sn: bool,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        ps.add_param(
            &format!("{name}.weight"),
            normal(rng, out_dim * in_dim, std),
            &[out_dim, in_dim],
        )?;
        if bias {
            ps.add_param(&format!("{name}.bias"), vec![0.0; out_dim], &[out_dim])?;
        }
        if sn {
            let wn = format!("{name}.weight");
            add_sn_buffers(ps, rng, &wn, out_dim, in_dim)?;
            warm_start_sn(ps, &wn, &ps.get(&wn, Mode::Frozen)?)?;
        }
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            bias,
            sn,
        })
    }

    pub fn weight(&self, ps: &ParamStore, mode: Mode) -> Result<Tensor> {
        let wn = format!("{}.weight", self.name);
        let w = ps.get(&wn, mode)?;
        if self.sn {
            sn_weight(ps, &wn, &w, mode)
        } else {
            Ok(w)
        }
    }

    /// `x: (B, in) -> (B, out)`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.weight(ps, mode)?;
        let y = x.matmul(&w.t()?)?;
        if self.bias {
            let b = ps.get(&format!("{}.bias", self.name), mode)?;
            Ok(y.broadcast_add(&b)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub sn: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        sn: bool,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        ps.add_param(
            &format!("{name}.weight"),
            normal(rng, cout * fan_in, (2.0 / fan_in as f64).sqrt()),
            &[cout, cin, k, k],
        )?;
        ps.add_param(&format!("{name}.bias"), vec![0.0; cout], &[cout])?;
        if sn {
            let wn = format!("{name}.weight");
            add_sn_buffers(ps, rng, &wn, cout, fan_in)?;
            warm_start_sn(ps, &wn, &ps.get(&wn, Mode::Frozen)?.reshape((cout, fan_in))?)?;
        }
        Ok(Self {
            name: name.to_string(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            sn,
        })
    }

    pub fn weight(&self, ps: &ParamStore, mode: Mode) -> Result<Tensor> {
        let wn = format!("{}.weight", self.name);
        let w = ps.get(&wn, mode)?;
        if !self.sn {
            return Ok(w);
        }
        let w2 = w.reshape((self.cout, self.cin * self.k * self.k))?;
        Ok(sn_weight(ps, &wn, &w2, mode)?.reshape((self.cout, self.cin, self.k, self.k))?)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.weight(ps, mode)?;
        let b = ps.get(&format!("{}.bias", self.name), mode)?;
        let y = ops::conv2d(x, &w, self.stride, self.pad)?;
        Ok(y.broadcast_add(&b.reshape((1, self.cout, 1, 1))?)?)
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1 (doubles H, W).
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub sn: bool,
}

const CONVT_K: usize = 4;

impl ConvT2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        sn: bool,
    ) -> Result<Self> {
        let k = CONVT_K;
        // Each output pixel of a stride-2 kernel-4 transposed conv sees
        // cin * 4 taps.
        let fan_in = cin * 4;
        ps.add_param(
            &format!("{name}.weight"),
            normal(rng, cin * cout * k * k, (2.0 / fan_in as f64).sqrt()),
            &[cin, cout, k, k],
        )?;
        ps.add_param(&format!("{name}.bias"), vec![0.0; cout], &[cout])?;
        if sn {
            let wn = format!("{name}.weight");
            add_sn_buffers(ps, rng, &wn, cout, cin * k * k)?;
            let w2 = ps
                .get(&wn, Mode::Frozen)?
                .transpose(0, 1)?
                .contiguous()?
                .reshape((cout, cin * k * k))?;
            warm_start_sn(ps, &wn, &w2)?;
        }
        Ok(Self {
            name: name.to_string(),
            cin,
            cout,
            sn,
        })
    }

    pub fn weight(&self, ps: &ParamStore, mode: Mode) -> Result<Tensor> {
        let wn = format!("{}.weight", self.name);
        let w = ps.get(&wn, mode)?;
        if !self.sn {
            return Ok(w);
        }
        let k = CONVT_K;
        // Output-channel-major 2-D view for the spectral norm.
        let w2 = w
            .transpose(0, 1)?
            .contiguous()?
            .reshape((self.cout, self.cin * k * k))?;
        Ok(sn_weight(ps, &wn, &w2, mode)?
            .reshape((self.cout, self.cin, k, k))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.weight(ps, mode)?;
        let b = ps.get(&format!("{}.bias", self.name), mode)?;
        let y = ops::conv_transpose2d(x, &w, 2, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, self.cout, 1, 1))?)?)
    }
}

/// Per-channel batch normalization over `(B, C, H, W)` or `(B, C)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub c: usize,
    pub affine: bool,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, affine: bool) -> Result<Self> {
        if affine {
            ps.add_param(&format!("{name}.gain"), vec![1.0; c], &[c])?;
            ps.add_param(&format!("{name}.bias"), vec![0.0; c], &[c])?;
        }
        ps.add_buffer(&format!("{name}.running_mean"), vec![0.0; c], &[c])?;
        ps.add_buffer(&format!("{name}.running_var"), vec![1.0; c], &[c])?;
        Ok(Self {
            name: name.to_string(),
            c,
            affine,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (rm_name, rv_name) = (
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        );
        let xhat = if mode.is_train() {
            let (mean, var) = channel_moments(x)?;
            let n = x.elem_count() / self.c;
            let unbiased = n as f64 / (n.max(2) - 1) as f64;
            let m = self.momentum;
            let dev = x.device();
            let mean = Tensor::from_vec(mean, self.c, dev)?.to_dtype(x.dtype())?;
            let var = Tensor::from_vec(var, self.c, dev)?.to_dtype(x.dtype())?;
            let rm = ((ps.buffer(&rm_name)? * (1.0 - m))? + (mean * m)?)?;
            let rv = ((ps.buffer(&rv_name)? * (1.0 - m))? + (var * (m * unbiased))?)?;
            ps.set_buffer(&rm_name, &rm)?;
            ps.set_buffer(&rv_name, &rv)?;
            batch_normalize(x, NORM_EPS)?
        } else {
            let mean = ps.buffer(&rm_name)?;
            let inv = (ps.buffer(&rv_name)? + NORM_EPS)?.sqrt()?.recip()?;
            let shift = (mean * &inv)?.neg()?;
            channel_affine(x, &inv.unsqueeze(0)?, &shift.unsqueeze(0)?)?
        };
        if !self.affine {
            return Ok(xhat);
        }
        let g = ps.get(&format!("{}.gain", self.name), mode)?.unsqueeze(0)?;
        let b = ps.get(&format!("{}.bias", self.name), mode)?.unsqueeze(0)?;
        channel_affine(&xhat, &g, &b)
    }
}

/// Batch normalization whose per-channel scale and shift are linear
/// functions of a condition vector: `y = (1 + W_g c) * xhat + W_b c`.
#[derive(Debug, Clone)]
pub struct CondBatchNorm {
    pub bn: BatchNorm,
    pub gamma: Linear,
    pub beta: Linear,
}

impl CondBatchNorm {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c, false)?,
            gamma: Linear::new(ps, rng, &format!("{name}.gamma"), cond_dim, c, true, false)?,
            beta: Linear::new(ps, rng, &format!("{name}.beta"), cond_dim, c, true, false)?,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        cond: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let xhat = self.bn.forward(ps, x, mode)?;
        let g = (self.gamma.forward(ps, cond, mode)? + 1.0)?;
        let s = self.beta.forward(ps, cond, mode)?;
        channel_affine(&xhat, &g, &s)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        ps.add_param(&format!("{name}.gain"), vec![1.0; dim], &[dim])?;
        ps.add_param(&format!("{name}.bias"), vec![0.0; dim], &[dim])?;
        Ok(Self {
            name: name.to_string(),
            dim,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let g = ps.get(&format!("{}.gain", self.name), mode)?;
        let b = ps.get(&format!("{}.bias", self.name), mode)?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        ps.add_param(
            &format!("{name}.weight"),
            normal(rng, vocab * dim, 1.0),
            &[vocab, dim],
        )?;
        Ok(Self {
            name: name.to_string(),
            vocab,
            dim,
        })
    }

    /// `ids: (B, L)` u32 -> `(B, L, dim)`.
    pub fn forward(&self, ps: &ParamStore, ids: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let w = ps.get(&format!("{}.weight", self.name), mode)?;
        Ok(w.index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, self.dim))?)
    }
}
