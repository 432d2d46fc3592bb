use candle_core::{Tensor, D};

use super::{fan_in_bound, Init, Param, Scope};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k x k` convolution with fan-in uniform weights and zero bias.
    pub fn new(
        s: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = s.weight(
            "weight",
            (c_out, c_in, k, k),
            Init::Uniform(fan_in_bound(c_in * k * k)),
        )?;
        let bias = if bias {
            Some(s.weight("bias", c_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.t(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.t().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over `(N, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(s: &mut Scope<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            weight: s.weight("weight", c, Init::Const(1.0))?,
            bias: s.weight("bias", c, Init::Zeros)?,
            running_mean: s.buffer("running_mean", c, Init::Zeros)?,
            running_var: s.buffer("running_var", c, Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = (1, (), 1, 1);
        let (mean, var) = if train {
            let (n, _, h, w) = x.dims4()?;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centred = x.broadcast_sub(&mean)?;
            let var = centred
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.t().detach() * (1.0 - m))?
                + (mean.flatten_all()?.detach() * m)?)?;
            let rv = ((self.running_var.t().detach() * (1.0 - m))?
                + (var.flatten_all()?.detach() * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.t().reshape(shape)?,
                self.running_var.t().reshape(shape)?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y
            .broadcast_mul(&self.weight.t().reshape(shape)?)?
            .broadcast_add(&self.bias.t().reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: s.weight("weight", (d_out, d_in), init)?,
            bias: s.weight("bias", d_out, Init::Zeros)?,
        })
    }

    /// Applies `x W^T + b` over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t().t()?)?;
        Ok(y.broadcast_add(&self.bias.t())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope<'_>, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: s.weight("weight", d, Init::Const(1.0))?,
            bias: s.weight("bias", d, Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y
            .broadcast_mul(&self.weight.t())?
            .broadcast_add(&self.bias.t())?)
    }
}
