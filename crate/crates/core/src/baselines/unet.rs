use candle_core::Tensor;

use crate::error::Result;
use crate::model::{Architecture, Segmenter};
use crate::nn::{ops, BatchNorm2d, Conv2d, ParamStore, Scope};

/// `(conv3x3 -> BN -> ReLU) x 2`
pub(crate) struct DoubleConv {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl DoubleConv {
    pub(crate) fn new(s: &mut Scope<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 1, 1, false)?,
            b1: BatchNorm2d::new(&mut s.pp("bn1"), c_out)?,
            c2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1, 1, false)?,
            b2: BatchNorm2d::new(&mut s.pp("bn2"), c_out)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.b1.forward(&self.c1.forward(x)?, train)?.relu()?;
        Ok(self.b2.forward(&self.c2.forward(&x)?, train)?.relu()?)
    }
}

/// Additive attention gate: `x * sigmoid(psi(relu(W_g g + W_x x)))`.
struct AttentionGate {
    wg: Conv2d,
    wg_bn: BatchNorm2d,
    wx: Conv2d,
    wx_bn: BatchNorm2d,
    psi: Conv2d,
    psi_bn: BatchNorm2d,
}

impl AttentionGate {
    fn new(s: &mut Scope<'_>, c_g: usize, c_x: usize) -> Result<Self> {
        let c_int = (c_x / 2).max(1);
        Ok(Self {
            wg: Conv2d::new(&mut s.pp("wg"), c_g, c_int, 1, 1, 0, true)?,
            wg_bn: BatchNorm2d::new(&mut s.pp("wg_bn"), c_int)?,
            wx: Conv2d::new(&mut s.pp("wx"), c_x, c_int, 1, 1, 0, true)?,
            wx_bn: BatchNorm2d::new(&mut s.pp("wx_bn"), c_int)?,
            psi: Conv2d::new(&mut s.pp("psi"), c_int, 1, 1, 1, 0, true)?,
            psi_bn: BatchNorm2d::new(&mut s.pp("psi_bn"), 1)?,
        })
    }

    /// Returns the gated skip and the `(B, 1, H, W)` coefficients.
    fn forward(&self, g: &Tensor, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let g1 = self.wg_bn.forward(&self.wg.forward(g)?, train)?;
        let x1 = self.wx_bn.forward(&self.wx.forward(x)?, train)?;
        let a = (g1 + x1)?.relu()?;
        let psi = candle_nn::ops::sigmoid(&self.psi_bn.forward(&self.psi.forward(&a)?, train)?)?;
        Ok((x.broadcast_mul(&psi)?, psi))
    }
}

struct Up {
    gate: Option<AttentionGate>,
    conv: DoubleConv,
}

/// Four-level encoder/decoder with skip concatenation and channel doubling
/// per level; optionally with attention gates on every skip.
pub struct Unet {
    store: ParamStore,
    arch: Architecture,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<Up>,
    outc: Conv2d,
    force_open_gates: bool,
}

impl Unet {
    pub(crate) fn new(
        in_channels: usize,
        base: usize,
        attention: bool,
        seed: u64,
        dtype: candle_core::DType,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let widths: Vec<usize> = (0..5).map(|i| base << i).collect();
        let inc = DoubleConv::new(&mut root.pp("inc"), in_channels, widths[0])?;
        let downs = (1..5)
            .map(|i| DoubleConv::new(&mut root.pp(format!("down{i}")), widths[i - 1], widths[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        for i in 1..5 {
            // up1 merges the bottleneck with the deepest skip
            let c_big = widths[5 - i];
            let c_skip = widths[4 - i];
            let mut s = root.pp(format!("up{i}"));
            let gate = if attention {
                Some(AttentionGate::new(&mut s.pp("gate"), c_big, c_skip)?)
            } else {
                None
            };
            let conv = DoubleConv::new(&mut s.pp("conv"), c_big + c_skip, c_skip)?;
            ups.push(Up { gate, conv });
        }
        let outc = Conv2d::new(&mut root.pp("outc"), widths[0], 1, 1, 1, 0, true)?;
        Ok(Self {
            store,
            arch: if attention {
                Architecture::AttentionUnet
            } else {
                Architecture::Unet
            },
            inc,
            downs,
            ups,
            outc,
            force_open_gates: false,
        })
    }

    /// Replaces every attention coefficient by 1, reducing the gated model
    /// to a plain UNet.
    pub fn set_force_open_gates(&mut self, open: bool) {
        self.force_open_gates = open;
    }

    /// Logits and the attention coefficients of each gate, deepest first.
    pub fn forward_with_gates(&self, x: &Tensor, train: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let mut skips = vec![self.inc.forward(x, train)?];
        for d in &self.downs {
            let pooled = skips.last().unwrap().max_pool2d(2)?;
            skips.push(d.forward(&pooled, train)?);
        }
        let mut y = skips.pop().unwrap();
        let mut gates = Vec::new();
        for up in &self.ups {
            let skip = skips.pop().unwrap();
            let g = ops::upsample2x(&y)?;
            let skip = match &up.gate {
                Some(gate) if !self.force_open_gates => {
                    let (gated, psi) = gate.forward(&g, &skip, train)?;
                    gates.push(psi);
                    gated
                }
                _ => skip,
            };
            y = up.conv.forward(&Tensor::cat(&[&skip, &g], 1)?, train)?;
        }
        Ok((self.outc.forward(&y)?, gates))
    }
}

impl Segmenter for Unet {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_with_gates(x, train)?.0)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn architecture(&self) -> Architecture {
        self.arch
    }
}
