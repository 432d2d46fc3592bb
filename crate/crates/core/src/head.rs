//! Trainable segmentation head on top of the frozen token grid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Segmenter};
use crate::nn::{ops, Conv2d, ParamStore};
use crate::vit::{FrozenBackbone, TokenGrid, GRID, PATCH_SIZE};

pub const OUTPUT_SIZE: usize = GRID * PATCH_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Token width of the backbone.
    pub embed_dim: usize,
    /// Channels after the 1x1 token classifier.
    pub channels: usize,
}

impl HeadConfig {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            channels: 128,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.channels < 8 || self.channels % 8 != 0 {
            return Err(Error::invalid(format!(
                "head needs embed_dim >= 1 and channels a positive multiple of 8, got {}/{}",
                self.embed_dim, self.channels
            )));
        }
        Ok(())
    }

    /// Output channels of the three decoder stages.
    pub fn stage_channels(&self) -> [usize; 3] {
        [self.channels / 2, self.channels / 4, self.channels / 8]
    }
}

/// `(B, C, 32, 32)` channel-first features.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

pub struct SegHead {
    config: HeadConfig,
    store: ParamStore,
    classifier: Conv2d,
    stages: Vec<Conv2d>,
    out: Conv2d,
}

impl SegHead {
    pub fn new(config: HeadConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let classifier = Conv2d::new(
            &mut root.pp("classifier"),
            config.embed_dim,
            config.channels,
            1,
            1,
            0,
            true,
        )?;
        let mut stages = Vec::new();
        let mut c_in = config.channels;
        for (i, c_out) in config.stage_channels().into_iter().enumerate() {
            stages.push(Conv2d::new(
                &mut root.pp(format!("decoder.{i}")),
                c_in,
                c_out,
                3,
                1,
                1,
                true,
            )?);
            c_in = c_out;
        }
        let out = Conv2d::new(&mut root.pp("decoder.out"), c_in, 1, 1, 1, 0, true)?;
        Ok(Self {
            config,
            store,
            classifier,
            stages,
            out,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Pointwise projection of every grid cell from D to C channels.
    pub fn linear_classifier_token(&self, z: &TokenGrid) -> Result<FeatureMap> {
        let (_, gh, gw, d) = z.0.dims4()?;
        if (gh, gw, d) != (GRID, GRID, self.config.embed_dim) {
            return Err(Error::shape(
                "token grid",
                &[gh, gw, d],
                &[GRID, GRID, self.config.embed_dim],
            ));
        }
        Ok(FeatureMap(self.classifier.forward(&z.to_channels_first()?)?))
    }

    /// Three conv/ReLU/x2 stages (32 -> 256), a 1x1 projection to one
    /// channel and a bilinear resize to 448.
    pub fn decode(&self, f: &FeatureMap) -> Result<Tensor> {
        let mut x = f.0.clone();
        for stage in &self.stages {
            x = ops::upsample2x(&stage.forward(&x)?.relu()?)?;
        }
        let logits = self.out.forward(&x)?;
        ops::resize_bilinear(&logits, OUTPUT_SIZE, OUTPUT_SIZE)
    }

    pub fn forward_grid(&self, z: &TokenGrid) -> Result<Tensor> {
        self.decode(&self.linear_classifier_token(z)?)
    }
}

impl Segmenter for SegHead {
    /// `x` is a `(B, 32, 32, D)` batch of token grids.
    fn forward(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        self.forward_grid(&TokenGrid(x.clone()))
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn architecture(&self) -> Architecture {
        Architecture::VitHead
    }
}

/// Full path from preprocessed `(B, 3, 448, 448)` images to logits.
pub fn forward(x: &Tensor, backbone: &FrozenBackbone, head: &SegHead) -> Result<Tensor> {
    head.forward_grid(&backbone.encode(x)?)
}
