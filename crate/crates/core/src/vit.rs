//! Frozen vision-transformer feature extractor.
//!
//! The parameter schema follows the published self-supervised ViT/14
//! checkpoints (`patch_embed.proj`, `blocks.{i}.attn.qkv`, `ls1.gamma`, ...),
//! so converted checkpoints load by name. Images are cut into 14 px patches,
//! embedded, run through pre-norm transformer blocks and the patch tokens
//! (class token dropped) are laid out on the patch grid.

use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{archive, ops, Init, LayerNorm, Linear, Param, ParamStore, Scope};

pub const PATCH_SIZE: usize = 14;
/// Patch grid side for the canonical 448 px input.
pub const GRID: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Base,
    Large,
    Giant,
    TinyTest,
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "large" => Ok(Self::Large),
            "giant" => Ok(Self::Giant),
            "tiny-test" | "tiny" => Ok(Self::TinyTest),
            other => Err(Error::Config(format!("unknown backbone variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for VariantName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Large => "large",
            Self::Giant => "giant",
            Self::TinyTest => "tiny-test",
        })
    }
}

/// Feed-forward flavour inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// `fc2(gelu(fc1(x)))`
    Plain,
    /// Gated `w3(silu(a) * b)` with `[a, b] = w12(x)`, as in the giant weights.
    SwiGlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneVariant {
    pub name: VariantName,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp: MlpKind,
    pub mlp_hidden: usize,
    pub patch_size: usize,
}

impl BackboneVariant {
    pub fn base() -> Self {
        Self::published(VariantName::Base, 768, 12, 12, MlpKind::Plain, 3072)
    }

    pub fn large() -> Self {
        Self::published(VariantName::Large, 1024, 24, 16, MlpKind::Plain, 4096)
    }

    pub fn giant() -> Self {
        // hidden = round_up(4 * 1536 * 2 / 3, 8)
        Self::published(VariantName::Giant, 1536, 40, 24, MlpKind::SwiGlu, 4096)
    }

    fn published(
        name: VariantName,
        embed_dim: usize,
        depth: usize,
        n_heads: usize,
        mlp: MlpKind,
        mlp_hidden: usize,
    ) -> Self {
        Self {
            name,
            embed_dim,
            depth,
            n_heads,
            mlp,
            mlp_hidden,
            patch_size: PATCH_SIZE,
        }
    }

    /// Small CPU-friendly variant for tests and phantom runs.
    pub fn tiny_test(embed_dim: usize, depth: usize, n_heads: usize) -> Result<Self> {
        let v = Self {
            name: VariantName::TinyTest,
            embed_dim,
            depth,
            n_heads,
            mlp: MlpKind::Plain,
            mlp_hidden: 4 * embed_dim,
            patch_size: PATCH_SIZE,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_name(name: VariantName) -> Self {
        match name {
            VariantName::Base => Self::base(),
            VariantName::Large => Self::large(),
            VariantName::Giant => Self::giant(),
            VariantName::TinyTest => Self::tiny_test(64, 2, 4).expect("valid default"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 16 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be >= 16 and divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("backbone needs at least one block"));
        }
        let published = match self.name {
            VariantName::Base => Some(768),
            VariantName::Large => Some(1024),
            VariantName::Giant => Some(1536),
            VariantName::TinyTest => None,
        };
        if published.is_some_and(|d| d != self.embed_dim) {
            return Err(Error::invalid(format!(
                "{} variant has embed_dim {}, not {}",
                self.name,
                published.unwrap(),
                self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// `(name, shape)` of every tensor, in registration order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden;
        let p = self.patch_size;
        let mut s = vec![
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![1, 1 + GRID * GRID, d]),
            ("patch_embed.proj.weight".to_string(), vec![d, 3, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
        ];
        for i in 0..self.depth {
            let b = |n: &str| format!("blocks.{i}.{n}");
            s.push((b("norm1.weight"), vec![d]));
            s.push((b("norm1.bias"), vec![d]));
            s.push((b("attn.qkv.weight"), vec![3 * d, d]));
            s.push((b("attn.qkv.bias"), vec![3 * d]));
            s.push((b("attn.proj.weight"), vec![d, d]));
            s.push((b("attn.proj.bias"), vec![d]));
            s.push((b("ls1.gamma"), vec![d]));
            s.push((b("norm2.weight"), vec![d]));
            s.push((b("norm2.bias"), vec![d]));
            match self.mlp {
                MlpKind::Plain => {
                    s.push((b("mlp.fc1.weight"), vec![h, d]));
                    s.push((b("mlp.fc1.bias"), vec![h]));
                    s.push((b("mlp.fc2.weight"), vec![d, h]));
                    s.push((b("mlp.fc2.bias"), vec![d]));
                }
                MlpKind::SwiGlu => {
                    s.push((b("mlp.w12.weight"), vec![2 * h, d]));
                    s.push((b("mlp.w12.bias"), vec![2 * h]));
                    s.push((b("mlp.w3.weight"), vec![d, h]));
                    s.push((b("mlp.w3.bias"), vec![d]));
                }
            }
            s.push((b("ls2.gamma"), vec![d]));
        }
        s.push(("norm.weight".to_string(), vec![d]));
        s.push(("norm.bias".to_string(), vec![d]));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.schema()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Cuts `(B, 3, H, W)` images into row-major `(B, N, 3*p*p)` patch rows.
/// Each row is flattened channel-major, matching the patch-embedding kernel.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * patch * patch))?)
}

/// Inverse of [`patchify`].
pub fn untile(patches: &Tensor, grid_h: usize, grid_w: usize, patch: usize) -> Result<Tensor> {
    let (b, n, len) = patches.dims3()?;
    if n != grid_h * grid_w || len % (patch * patch) != 0 {
        return Err(Error::invalid(format!(
            "{n} patches of length {len} do not tile a {grid_h}x{grid_w} grid of {patch}px"
        )));
    }
    let c = len / (patch * patch);
    Ok(patches
        .reshape((b, grid_h, grid_w, c, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, grid_h * patch, grid_w * patch))?)
}

/// `(B, N + 1, D)` tokens, class token first.
#[derive(Debug, Clone)]
pub struct TokenSequence(pub Tensor);

/// Encoded patch tokens on the spatial grid, `(B, 32, 32, D)`.
#[derive(Debug, Clone)]
pub struct TokenGrid(pub Tensor);

impl TokenGrid {
    /// Channel-first `(B, D, 32, 32)` view for convolutional processing.
    pub fn to_channels_first(&self) -> Result<Tensor> {
        Ok(self.0.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

struct Mlp {
    kind: MlpKind,
    hidden: usize,
    up: Linear,
    down: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(x)?;
        let h = match self.kind {
            MlpKind::Plain => h.gelu_erf()?,
            MlpKind::SwiGlu => {
                let a = h.narrow(D::Minus1, 0, self.hidden)?;
                let b = h.narrow(D::Minus1, self.hidden, self.hidden)?;
                (a.silu()? * b)?
            }
        };
        self.down.forward(&h)
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ls1: Param,
    norm2: LayerNorm,
    mlp: Mlp,
    ls2: Param,
    n_heads: usize,
}

impl Block {
    fn new(s: &mut Scope<'_>, v: &BackboneVariant) -> Result<Self> {
        let d = v.embed_dim;
        let lin = Init::TruncNormal(0.02);
        let norm1 = LayerNorm::new(&mut s.pp("norm1"), d, 1e-6)?;
        let qkv = Linear::new(&mut s.pp("attn.qkv"), d, 3 * d, lin)?;
        let proj = Linear::new(&mut s.pp("attn.proj"), d, d, lin)?;
        let ls1 = s.pp("ls1").weight("gamma", d, Init::Const(1.0))?;
        let norm2 = LayerNorm::new(&mut s.pp("norm2"), d, 1e-6)?;
        let mlp = match v.mlp {
            MlpKind::Plain => Mlp {
                kind: MlpKind::Plain,
                hidden: v.mlp_hidden,
                up: Linear::new(&mut s.pp("mlp.fc1"), d, v.mlp_hidden, lin)?,
                down: Linear::new(&mut s.pp("mlp.fc2"), v.mlp_hidden, d, lin)?,
            },
            MlpKind::SwiGlu => Mlp {
                kind: MlpKind::SwiGlu,
                hidden: v.mlp_hidden,
                up: Linear::new(&mut s.pp("mlp.w12"), d, 2 * v.mlp_hidden, lin)?,
                down: Linear::new(&mut s.pp("mlp.w3"), v.mlp_hidden, d, lin)?,
            },
        };
        let ls2 = s.pp("ls2").weight("gamma", d, Init::Const(1.0))?;
        Ok(Self {
            norm1,
            qkv,
            proj,
            ls1,
            norm2,
            mlp,
            ls2,
            n_heads: v.n_heads,
        })
    }

    fn attention(&self, x: &Tensor, differentiable: bool) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.n_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.n_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = if differentiable {
            candle_nn::ops::softmax(&logits, D::Minus1)?
        } else {
            candle_nn::ops::softmax_last_dim(&logits)?
        };
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor, differentiable: bool) -> Result<Tensor> {
        let a = self.attention(&self.norm1.forward(x)?, differentiable)?;
        let x = (x + a.broadcast_mul(&self.ls1.t())?)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((&x + m.broadcast_mul(&self.ls2.t())?)?)
    }
}

/// Transformer backbone. Call [`VitBackbone::freeze`] before probing.
pub struct VitBackbone {
    variant: BackboneVariant,
    store: ParamStore,
    cls_token: Param,
    pos_embed: Param,
    patch_w: Param,
    patch_b: Param,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VitBackbone {
    /// Randomly initialised backbone (truncated-normal, std 0.02).
    pub fn new(variant: BackboneVariant, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(variant, ParamStore::new(seed, dtype))
    }

    fn build(variant: BackboneVariant, mut store: ParamStore) -> Result<Self> {
        variant.validate()?;
        let d = variant.embed_dim;
        let p = variant.patch_size;
        let mut root = store.root();
        let cls_token = root.weight("cls_token", (1, 1, d), Init::TruncNormal(0.02))?;
        let pos_embed = root.weight("pos_embed", (1, 1 + GRID * GRID, d), Init::TruncNormal(0.02))?;
        let mut pe = root.pp("patch_embed.proj");
        let patch_w = pe.weight("weight", (d, 3, p, p), Init::TruncNormal(0.02))?;
        let patch_b = pe.weight("bias", d, Init::Zeros)?;
        let blocks = (0..variant.depth)
            .map(|i| Block::new(&mut root.pp(format!("blocks.{i}")), &variant))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut root.pp("norm"), d, 1e-6)?;
        Ok(Self {
            variant,
            store,
            cls_token,
            pos_embed,
            patch_w,
            patch_b,
            blocks,
            norm,
        })
    }

    pub fn variant(&self) -> &BackboneVariant {
        &self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Loads weights by name. A positional table trained on a different
    /// grid is bilinearly resampled to 32x32. Returns the loaded names.
    pub fn load_checkpoint(
        path: &Path,
        variant: BackboneVariant,
        dtype: DType,
    ) -> Result<(Self, Vec<String>)> {
        let model = Self::build(variant, ParamStore::zeroed(dtype))?;
        let mut ar = archive::load(path)?;
        if let Some(pos) = ar.tensors.get("pos_embed") {
            let (_, n, d) = pos.dims3()?;
            let g = ((n - 1) as f64).sqrt().round() as usize;
            if n != 1 + GRID * GRID && g * g + 1 == n && d == variant.embed_dim {
                let cls = pos.narrow(1, 0, 1)?;
                let grid = pos
                    .narrow(1, 1, n - 1)?
                    .reshape((1, g, g, d))?
                    .permute((0, 3, 1, 2))?
                    .to_dtype(DType::F64)?;
                let grid = ops::resize_bilinear(&grid, GRID, GRID)?
                    .permute((0, 2, 3, 1))?
                    .reshape((1, GRID * GRID, d))?
                    .to_dtype(pos.dtype())?;
                let resized = Tensor::cat(&[&cls, &grid], 1)?;
                ar.tensors.insert("pos_embed".into(), resized);
            }
        }
        let manifest = model.store.load_state(&ar.tensors, path)?;
        Ok((model, manifest))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("variant".into(), self.variant.name.to_string());
        meta.insert("embed_dim".into(), self.variant.embed_dim.to_string());
        archive::save(path, &self.store.state()?, &meta)
    }

    /// Excludes every backbone tensor from gradient computation.
    pub fn freeze(self) -> FrozenBackbone {
        self.store.freeze();
        FrozenBackbone(self)
    }

    /// Patch rows `(B, N, 3*p*p)` to tokens `(B, N + 1, D)`: linear patch
    /// projection, class token prepended, learned positions added.
    pub fn embed_tokens(&self, patches: &Tensor) -> Result<TokenSequence> {
        let (b, n, len) = patches.dims3()?;
        if n != GRID * GRID {
            return Err(Error::invalid(format!(
                "expected {} patches, got {n}",
                GRID * GRID
            )));
        }
        if len != self.variant.patch_dim() {
            return Err(Error::invalid(format!(
                "patch length {len}, expected {}",
                self.variant.patch_dim()
            )));
        }
        let d = self.variant.embed_dim;
        let w = self.patch_w.t().reshape((d, len))?.t()?;
        let tokens = patches
            .broadcast_matmul(&w)?
            .broadcast_add(&self.patch_b.t())?;
        let cls = self.cls_token.t().broadcast_as((b, 1, d))?;
        let seq = Tensor::cat(&[&cls, &tokens], 1)?;
        Ok(TokenSequence(seq.broadcast_add(&self.pos_embed.t())?))
    }

    /// Runs the blocks and the final norm over a token sequence.
    pub fn transform(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let differentiable = !self.store.is_frozen();
        let mut x = tokens.0.clone();
        for block in &self.blocks {
            x = block.forward(&x, differentiable)?;
        }
        Ok(TokenSequence(self.norm.forward(&x)?))
    }

    /// `(B, 3, 448, 448)` images to the `(B, 32, 32, D)` patch-token grid.
    pub fn encode(&self, images: &Tensor) -> Result<TokenGrid> {
        let (b, c, h, w) = images.dims4()?;
        let side = GRID * self.variant.patch_size;
        if (c, h, w) != (3, side, side) {
            return Err(Error::shape("backbone input", &[c, h, w], &[3, side, side]));
        }
        if images.dtype() != self.dtype() {
            return Err(Error::invalid(format!(
                "input dtype {:?} does not match weights {:?}",
                images.dtype(),
                self.dtype()
            )));
        }
        let patches = patchify(images, self.variant.patch_size)?;
        let seq = self.transform(&self.embed_tokens(&patches)?)?;
        let d = self.variant.embed_dim;
        let patch_tokens = seq.0.narrow(1, 1, GRID * GRID)?;
        Ok(TokenGrid(patch_tokens.reshape((b, GRID, GRID, d))?))
    }
}

/// A backbone whose weights no longer receive gradients.
pub struct FrozenBackbone(VitBackbone);

impl std::ops::Deref for FrozenBackbone {
    type Target = VitBackbone;

    fn deref(&self) -> &VitBackbone {
        &self.0
    }
}
