//! Common interface over every trainable segmenter.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    AttentionUnet,
    Res50Unet,
    VitHead,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::AttentionUnet => "attention_unet",
            Self::Res50Unet => "res50_unet",
            Self::VitHead => "vit_head",
        }
    }

    pub fn is_baseline(&self) -> bool {
        !matches!(self, Self::VitHead)
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unet" => Self::Unet,
            "attention_unet" | "att_unet" => Self::AttentionUnet,
            "res50_unet" => Self::Res50Unet,
            "vit_head" | "vit" | "dinov2" => Self::VitHead,
            other => {
                return Err(crate::Error::Config(format!("unknown method `{other}`")));
            }
        })
    }
}

/// A model mapping a batch of inputs to `(B, 1, H, W)` logits.
///
/// For the transformer path the input is a batch of cached token grids,
/// since the backbone never changes during training.
pub trait Segmenter: Send + Sync {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor>;

    fn store(&self) -> &ParamStore;

    fn architecture(&self) -> Architecture;
}
