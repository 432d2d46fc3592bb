//! Comparison models behind the common [`Segmenter`] interface.

mod res50_unet;
mod unet;

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use res50_unet::Res50Unet;
pub use unet::Unet;

use crate::error::{Error, Result};
use crate::model::{Architecture, Segmenter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Square side of the network input in pixels.
    pub input_size: usize,
    pub base_channels: usize,
    pub pretrained_encoder: bool,
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        let input_size = match architecture {
            Architecture::VitHead => crate::head::OUTPUT_SIZE,
            _ => 320,
        };
        Self {
            architecture,
            input_size,
            base_channels: 64,
            pretrained_encoder: false,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_base_channels(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    /// Number of image channels the model consumes.
    pub fn in_channels(&self) -> usize {
        match self.architecture {
            Architecture::Unet | Architecture::AttentionUnet => 1,
            Architecture::Res50Unet | Architecture::VitHead => 3,
        }
    }

    /// Spatial factor the input side must be divisible by.
    pub fn size_multiple(&self) -> usize {
        match self.architecture {
            Architecture::Res50Unet => 32,
            Architecture::VitHead => crate::vit::PATCH_SIZE,
            _ => 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        let m = self.size_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return Err(Error::Config(format!(
                "{} input size {} is not divisible by {m}",
                self.architecture, self.input_size
            )));
        }
        Ok(())
    }
}

/// Builds a baseline with seeded random weights; a pretrained encoder is
/// loaded from `encoder_checkpoint` when `ModelSpec::pretrained_encoder` is set.
pub fn build_baseline(
    spec: &ModelSpec,
    seed: u64,
    dtype: DType,
    encoder_checkpoint: Option<&Path>,
) -> Result<Box<dyn Segmenter>> {
    spec.validate()?;
    match spec.architecture {
        Architecture::Unet => Ok(Box::new(build_unet(spec, seed, dtype)?)),
        Architecture::AttentionUnet => Ok(Box::new(build_attention_unet(spec, seed, dtype)?)),
        Architecture::Res50Unet => Ok(Box::new(build_res50_unet(spec, seed, dtype, encoder_checkpoint)?.0)),
        Architecture::VitHead => Err(Error::Config(
            "vit_head is not a baseline; build it from a backbone".into(),
        )),
    }
}

fn expect(spec: &ModelSpec, arch: Architecture) -> Result<()> {
    spec.validate()?;
    if spec.architecture != arch {
        return Err(Error::Config(format!(
            "spec is for {}, not {arch}",
            spec.architecture
        )));
    }
    Ok(())
}

pub fn build_unet(spec: &ModelSpec, seed: u64, dtype: DType) -> Result<Unet> {
    expect(spec, Architecture::Unet)?;
    Unet::new(spec.in_channels(), spec.base_channels, false, seed, dtype)
}

pub fn build_attention_unet(spec: &ModelSpec, seed: u64, dtype: DType) -> Result<Unet> {
    expect(spec, Architecture::AttentionUnet)?;
    Unet::new(spec.in_channels(), spec.base_channels, true, seed, dtype)
}

/// Returns the model and the names loaded into its encoder (empty when
/// not pretrained).
pub fn build_res50_unet(
    spec: &ModelSpec,
    seed: u64,
    dtype: DType,
    encoder_checkpoint: Option<&Path>,
) -> Result<(Res50Unet, Vec<String>)> {
    expect(spec, Architecture::Res50Unet)?;
    let model = Res50Unet::new(spec.base_channels, seed, dtype)?;
    let manifest = if spec.pretrained_encoder {
        let path = encoder_checkpoint.ok_or_else(|| {
            Error::Config("pretrained encoder requested but no checkpoint given".into())
        })?;
        model.load_encoder(path)?
    } else {
        Vec::new()
    };
    Ok((model, manifest))
}
