//! Convolution primitives as im2col/col2im custom ops over one large matmul.
//!
//! Column layout is `(C*k*k, B*H_out*W_out)`: row `(c*k + ki)*k + kj`, column
//! `b*H_out*W_out + oy*W_out + ox`. Each op's backward is the other op.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geo {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geo {
    fn oh(&self) -> usize {
        (self.h + 2 * self.p - self.k) / self.s + 1
    }

    fn ow(&self) -> usize {
        (self.w + 2 * self.p - self.k) / self.s + 1
    }
}

fn im2col<T: WithDType>(x: &[T], b: usize, g: Geo) -> Vec<T> {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * g.c * g.k * g.k * plane];
    for bi in 0..b {
        for c in 0..g.c {
            let xin = &x[(bi * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let dst = &mut out[(row * b + bi) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.s + ki) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &xin[iy as usize * g.w..][..g.w];
                        let d = &mut dst[oy * ow..][..ow];
                        for (ox, dv) in d.iter_mut().enumerate() {
                            let ix = (ox * g.s + kj) as isize - g.p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *dv = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], b: usize, g: Geo) -> Vec<T> {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * g.c * g.h * g.w];
    for bi in 0..b {
        for c in 0..g.c {
            let xo = &mut out[(bi * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let src = &cols[(row * b + bi) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.s + ki) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let d = &mut xo[iy as usize * g.w..][..g.w];
                        let s = &src[oy * ow..][..ow];
                        for (ox, sv) in s.iter().enumerate() {
                            let ix = (ox * g.s + kj) as isize - g.p as isize;
                            if ix >= 0 && ix < g.w as isize {
                                d[ix as usize] += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(Geo);
struct Col2Im(Geo);

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col/col2im expect contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[0];
        let st = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, l)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, l)?, b, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((st, Shape::from((g.c * g.k * g.k, b * g.oh() * g.ow()))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[1] / (g.oh() * g.ow());
        let st = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, l)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, l)?, b, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((st, Shape::from((b, g.c, g.h, g.w))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Cross-correlation. `x: (B, C, H, W)`, `w: (O, C, k, k)`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = Geo {
        c,
        h,
        w: wd,
        k,
        s: stride,
        p: pad,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = w.reshape((o, c * k * k))?.matmul(&cols)?;
    Ok(y.reshape((o, b, g.oh() * g.ow()))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((b, o, g.oh(), g.ow()))?)
}

/// Transposed convolution. `x: (B, Cin, H, W)`, `w: (Cin, Cout, k, k)`,
/// output side `(H - 1) * stride - 2 * pad + k`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (_, co, k, _) = w.dims4()?;
    let g = Geo {
        c: co,
        h: (h - 1) * stride + k - 2 * pad,
        w: (wd - 1) * stride + k - 2 * pad,
        k,
        s: stride,
        p: pad,
    };
    let xm = x
        .reshape((b, cin, h * wd))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((cin, b * h * wd))?;
    let cols = w.reshape((cin, co * k * k))?.t()?.matmul(&xm)?;
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// `(B, C, plane)` extents of a tensor laid out as `(B, C, ...)`.
fn bcp(dims: &[usize]) -> (usize, usize, usize) {
    (dims[0], dims[1], dims[2..].iter().product())
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()
}

fn device_like(v: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, p) = bcp(x.dims());
    Ok(moments(&host(x)?, b, c, p))
}

fn moments(x: &[f64], b: usize, c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for (ci, m) in mean.iter_mut().enumerate() {
            *m += x[(bi * c + ci) * p..][..p].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let m = mean[ci];
            var[ci] += x[(bi * c + ci) * p..][..p]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

struct BatchNormalize {
    eps: f64,
}

impl CustomOp1 for BatchNormalize {
    fn name(&self) -> &'static str {
        "batch-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], dims: &[usize], eps: f64) -> Vec<T> {
            let (b, c, p) = bcp(dims);
            let xf: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
            let (mean, var) = moments(&xf, b, c, p);
            let mut out = Vec::with_capacity(x.len());
            for bi in 0..b {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let m = mean[ci];
                    out.extend(
                        xf[(bi * c + ci) * p..][..p]
                            .iter()
                            .map(|v| T::from_f64((v - m) * inv)),
                    );
                }
            }
            out
        }
        let st = match s {
            CpuStorage::F32(v) => CpuStorage::F32(run(contiguous_slice(v, l)?, l.dims(), self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(run(contiguous_slice(v, l)?, l.dims(), self.eps)),
            _ => candle_core::bail!("batch-normalize supports f32 and f64 only"),
        };
        Ok((st, l.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (b, c, p) = bcp(arg.dims());
        let (_, var) = moments(&host(arg)?, b, c, p);
        let (xh, g) = (host(res)?, host(grad)?);
        let n = (b * p) as f64;
        let mut mg = vec![0.0; c];
        let mut mgx = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * p;
                for i in o..o + p {
                    mg[ci] += g[i];
                    mgx[ci] += g[i] * xh[i];
                }
            }
        }
        let mut dx = vec![0.0; g.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + self.eps).sqrt();
                let (a, q) = (mg[ci] / n, mgx[ci] / n);
                let o = (bi * c + ci) * p;
                for i in o..o + p {
                    dx[i] = inv * (g[i] - a - xh[i] * q);
                }
            }
        }
        Ok(Some(device_like(dx, arg)?))
    }
}

/// Normalizes `(B, C, ...)` data with its own per-channel batch statistics.
pub fn batch_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(BatchNormalize { eps })?)
}

struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], dims: &[usize], sc: &[T], sh: &[T], rows: usize) -> Vec<T> {
            let (b, c, p) = bcp(dims);
            let mut out = Vec::with_capacity(x.len());
            for bi in 0..b {
                let r = if rows == 1 { 0 } else { bi };
                for ci in 0..c {
                    let (a, z) = (sc[r * c + ci], sh[r * c + ci]);
                    out.extend(x[(bi * c + ci) * p..][..p].iter().map(|&v| v * a + z));
                }
            }
            out
        }
        let rows = l2.dims()[0];
        let st = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(z)) => CpuStorage::F32(run(
                contiguous_slice(x, l1)?,
                l1.dims(),
                contiguous_slice(a, l2)?,
                contiguous_slice(z, l3)?,
                rows,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(z)) => CpuStorage::F64(run(
                contiguous_slice(x, l1)?,
                l1.dims(),
                contiguous_slice(a, l2)?,
                contiguous_slice(z, l3)?,
                rows,
            )),
            _ => candle_core::bail!("channel-affine supports matching f32 or f64 only"),
        };
        Ok((st, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, p) = bcp(x.dims());
        let rows = scale.dims()[0];
        let (xv, sc, g) = (host(x)?, host(scale)?, host(grad)?);
        let mut dx = vec![0.0; xv.len()];
        let mut ds = vec![0.0; rows * c];
        let mut dz = vec![0.0; rows * c];
        for bi in 0..b {
            let r = if rows == 1 { 0 } else { bi };
            for ci in 0..c {
                let o = (bi * c + ci) * p;
                let a = sc[r * c + ci];
                let (mut sa, mut sz) = (0.0, 0.0);
                for i in o..o + p {
                    dx[i] = g[i] * a;
                    sa += g[i] * xv[i];
                    sz += g[i];
                }
                ds[r * c + ci] += sa;
                dz[r * c + ci] += sz;
            }
        }
        Ok((
            Some(device_like(dx, x)?),
            Some(device_like(ds, scale)?),
            Some(device_like(dz, shift)?),
        ))
    }
}

/// `x * scale + shift` per channel of `(B, C, ...)` data. `scale` and `shift`
/// are `(1, C)` (shared) or `(B, C)` (per sample).
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _) = bcp(x.dims());
    let rows = scale.dims()[0];
    let want = [if rows == 1 { 1 } else { b }, c];
    if scale.dims() != want {
        return Err(Error::shape("channel-affine scale", &want, scale.dims()));
    }
    if shift.dims() != want {
        return Err(Error::shape("channel-affine shift", &want, shift.dims()));
    }
    Ok(x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)?)
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Logistic sigmoid written through tanh so that it stays differentiable.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}
