//! Differentiable ops candle lacks on CPU: bilinear resize with a backward
//! pass, a stable softplus with an exact sigmoid gradient, and 3x3/2 max
//! pooling.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;
use crate::imaging::resample::linear_taps;

trait Real: Copy + Send + Sync + 'static {
    fn to64(self) -> f64;
    fn from64(v: f64) -> Self;
}

impl Real for f32 {
    fn to64(self) -> f64 {
        self as f64
    }
    fn from64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn to64(self) -> f64 {
        self
    }
    fn from64(v: f64) -> Self {
        v
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("resize expects a contiguous tensor".into())),
    }
}

fn resize_planes<T: Real>(src: &[T], planes: usize, dims: [usize; 4]) -> Vec<T> {
    let [h, w, oh, ow] = dims;
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut tmp = vec![0f64; h * ow];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            let row = &plane[r * w..(r + 1) * w];
            for (c, t) in tx.iter().enumerate() {
                let a = row[t.lo].to64();
                tmp[r * ow + c] = a + (row[t.hi].to64() - a) * t.frac;
            }
        }
        for t in &ty {
            for c in 0..ow {
                let a = tmp[t.lo * ow + c];
                out.push(T::from64(a + (tmp[t.hi * ow + c] - a) * t.frac));
            }
        }
    }
    out
}

/// Transpose of [`resize_planes`]: scatters output gradients back onto the
/// input grid with the same taps.
fn resize_planes_adjoint<T: Real>(grad: &[T], planes: usize, dims: [usize; 4]) -> Vec<T> {
    let [h, w, oh, ow] = dims;
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * h * w);
    let mut tmp = vec![0f64; h * ow];
    let mut acc = vec![0f64; h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (r, t) in ty.iter().enumerate() {
            for c in 0..ow {
                let v = g[r * ow + c].to64();
                tmp[t.lo * ow + c] += v * (1.0 - t.frac);
                tmp[t.hi * ow + c] += v * t.frac;
            }
        }
        for r in 0..h {
            for (c, t) in tx.iter().enumerate() {
                let v = tmp[r * ow + c];
                acc[r * w + t.lo] += v * (1.0 - t.frac);
                acc[r * w + t.hi] += v * t.frac;
            }
        }
        out.extend(acc.iter().map(|&v| T::from64(v)));
    }
    out
}

struct Resize {
    out_h: usize,
    out_w: usize,
}

struct ResizeAdjoint {
    in_h: usize,
    in_w: usize,
}

fn run<F32, F64>(
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: F32,
    f64_fn: F64,
) -> candle_core::Result<CpuStorage>
where
    F32: Fn(&[f32]) -> Vec<f32>,
    F64: Fn(&[f64]) -> Vec<f64>,
{
    match storage {
        CpuStorage::F32(v) => Ok(CpuStorage::F32(f32_fn(contiguous_slice(v, layout)?))),
        CpuStorage::F64(v) => Ok(CpuStorage::F64(f64_fn(contiguous_slice(v, layout)?))),
        _ => Err(candle_core::Error::Msg("resize supports f32 and f64 only".into())),
    }
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "bilinear-resize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let dims = [h, w, self.out_h, self.out_w];
        let out = run(
            s,
            l,
            |v| resize_planes(v, b * c, dims),
            |v| resize_planes(v, b * c, dims),
        )?;
        Ok((out, Shape::from((b, c, self.out_h, self.out_w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, in_h, in_w) = arg.dims4()?;
        let g = grad.contiguous()?;
        Ok(Some(g.apply_op1_no_bwd(&ResizeAdjoint { in_h, in_w })?))
    }
}

impl CustomOp1 for ResizeAdjoint {
    fn name(&self) -> &'static str {
        "bilinear-resize-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let dims = [self.in_h, self.in_w, oh, ow];
        let out = run(
            s,
            l,
            |v| resize_planes_adjoint(v, b * c, dims),
            |v| resize_planes_adjoint(v, b * c, dims),
        )?;
        Ok((out, Shape::from((b, c, self.in_h, self.in_w))))
    }
}

/// Bilinear resize of an `(N, C, H, W)` tensor (half-pixel centres), with
/// gradient support.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(Resize { out_h, out_w })?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

struct Softplus;

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn sp(x: f64) -> f64 {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        }
        let out = run(
            s,
            l,
            |v| v.iter().map(|&x| sp(x as f64) as f32).collect(),
            |v| v.iter().map(|&x| sp(x)).collect(),
        )?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let sigma = (arg.detach().neg()?.exp()? + 1.0)?.recip()?;
        Ok(Some(grad.mul(&sigma)?))
    }
}

/// `log(1 + exp(x))` in the overflow-free form `max(x, 0) + log1p(exp(-|x|))`.
/// Its derivative is exactly the logistic sigmoid.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

/// 3x3 max pooling, stride 2, padding 1, for non-negative inputs (zero
/// padding stands in for -inf after a rectifier).
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    // One pixel of padding on each side plus enough slack that every
    // window start fits a length-2*out run.
    let xp = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let win = xp
                .narrow(2, dy, 2 * oh)?
                .narrow(3, dx, 2 * ow)?
                .contiguous()?
                .reshape((b, c, oh, 2, ow, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, oh, ow))?;
            out = Some(match out {
                None => win,
                Some(o) => o.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}
