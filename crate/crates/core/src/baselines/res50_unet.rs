use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::model::{Architecture, Segmenter};
use crate::nn::{archive, ops, BatchNorm2d, Conv2d, ParamStore, Scope};

const ENCODER: &str = "encoder";
const BLOCKS: [usize; 4] = [3, 4, 6, 3];
const EXPANSION: usize = 4;

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(s: &mut Scope<'_>, c_in: usize, planes: usize, stride: usize) -> Result<Self> {
        let c_out = planes * EXPANSION;
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(&mut s.pp("downsample.0"), c_in, c_out, 1, stride, 0, false)?,
                BatchNorm2d::new(&mut s.pp("downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, planes, 1, 1, 0, false)?,
            bn1: BatchNorm2d::new(&mut s.pp("bn1"), planes)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), planes, planes, 3, stride, 1, false)?,
            bn2: BatchNorm2d::new(&mut s.pp("bn2"), planes)?,
            conv3: Conv2d::new(&mut s.pp("conv3"), planes, c_out, 1, 1, 0, false)?,
            bn3: BatchNorm2d::new(&mut s.pp("bn3"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let identity = match &self.downsample {
            Some((c, b)) => b.forward(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// `(conv3x3 -> BN -> ReLU) x 2` after upsampling and skip concatenation.
struct DecoderBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DecoderBlock {
    fn new(s: &mut Scope<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), c_in, c_out, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(&mut s.pp("bn1"), c_out)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), c_out, c_out, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(&mut s.pp("bn2"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let x = ops::upsample2x(x)?;
        let x = match skip {
            Some(s) => Tensor::cat(&[&x, s], 1)?,
            None => x,
        };
        let x = self.bn1.forward(&self.conv1.forward(&x)?, train)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&x)?, train)?.relu()?)
    }
}

/// Bottleneck-residual encoder (3-4-6-3 blocks) with a five-stage UNet
/// decoder. Encoder tensors use the usual classification-checkpoint names
/// under an `encoder.` prefix.
pub struct Res50Unet {
    store: ParamStore,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl Res50Unet {
    /// `base` is the stem width (64 for the published encoder); every
    /// encoder and decoder width scales with `base / 64`.
    pub(crate) fn new(base: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let mut enc = root.pp(ENCODER);
        let stem_conv = Conv2d::new(&mut enc.pp("conv1"), 3, base, 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(&mut enc.pp("bn1"), base)?;
        let mut layers = Vec::new();
        let mut c_in = base;
        for (li, &n) in BLOCKS.iter().enumerate() {
            let planes = base << li;
            let stride = if li == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for bi in 0..n {
                let mut s = enc.pp(format!("layer{}.{bi}", li + 1));
                blocks.push(Bottleneck::new(
                    &mut s,
                    c_in,
                    planes,
                    if bi == 0 { stride } else { 1 },
                )?);
                c_in = planes * EXPANSION;
            }
            layers.push(blocks);
        }

        let scale = |c: usize| (c * base / 64).max(4);
        let dec: Vec<usize> = [256, 128, 64, 32, 16].into_iter().map(scale).collect();
        // skips: layer3, layer2, layer1, stem, none
        let skips = [
            base * 4 * EXPANSION,
            base * 2 * EXPANSION,
            base * EXPANSION,
            base,
            0,
        ];
        let mut decoder = Vec::new();
        let mut c_prev = base * 8 * EXPANSION;
        for (i, (&c_out, &c_skip)) in dec.iter().zip(&skips).enumerate() {
            decoder.push(DecoderBlock::new(
                &mut root.pp(format!("decoder.{i}")),
                c_prev + c_skip,
                c_out,
            )?);
            c_prev = c_out;
        }
        let head = Conv2d::new(&mut root.pp("head"), c_prev, 1, 3, 1, 1, true)?;
        Ok(Self {
            store,
            stem_conv,
            stem_bn,
            layers,
            decoder,
            head,
        })
    }

    /// Overwrites every encoder tensor from a classification checkpoint
    /// with unprefixed names; returns the loaded names.
    pub fn load_encoder(&self, path: &Path) -> Result<Vec<String>> {
        if !path.exists() {
            return Err(Error::Io {
                path: path.to_owned(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "encoder checkpoint not found",
                ),
            });
        }
        let ar = archive::load(path)?;
        let prefix = format!("{ENCODER}.");
        self.store.load_mapped(&ar.tensors, path, |name| {
            name.strip_prefix(&prefix).map(str::to_string)
        })
    }

    pub fn encoder_tensor_count(&self) -> usize {
        let prefix = format!("{ENCODER}.");
        self.store.names().filter(|n| n.starts_with(&prefix)).count()
    }

    fn forward_impl(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let f0 = self
            .stem_bn
            .forward(&self.stem_conv.forward(x)?, train)?
            .relu()?;
        let mut y = ops::max_pool_3x3_s2(&f0)?;
        let mut feats = Vec::new();
        for layer in &self.layers {
            for b in layer {
                y = b.forward(&y, train)?;
            }
            feats.push(y.clone());
        }
        // feats: layer1 (1/4), layer2 (1/8), layer3 (1/16), layer4 (1/32)
        let skips = [Some(&feats[2]), Some(&feats[1]), Some(&feats[0]), Some(&f0), None];
        let mut d = feats[3].clone();
        for (block, skip) in self.decoder.iter().zip(skips) {
            d = block.forward(&d, skip, train)?;
        }
        self.head.forward(&d)
    }
}

impl Segmenter for Res50Unet {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.forward_impl(x, train)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn architecture(&self) -> Architecture {
        Architecture::Res50Unet
    }
}
