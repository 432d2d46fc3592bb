//! Parameter bookkeeping, layers and differentiable ops shared by every model.

pub mod archive;
mod layers;
pub mod ops;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};

/// Whether a tensor is optimised or only carried along (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Handle to one registered tensor.
///
/// Reads through [`Param::t`] are detached from the graph once the owning
/// store is frozen, so no gradient ever reaches it.
#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("shape", &self.var.shape())
            .field("frozen", &self.frozen.load(Ordering::Relaxed))
            .finish()
    }
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub(crate) fn set(&self, value: &Tensor) -> Result<()> {
        Ok(self.var.set(value)?)
    }
}

struct Entry {
    name: String,
    param: Param,
    kind: ParamKind,
}

/// Ordered registry of a model's named tensors.
pub struct ParamStore {
    entries: Vec<Entry>,
    frozen: Arc<AtomicBool>,
    dtype: DType,
    rng: ChaCha8Rng,
    zero_init: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            frozen: Arc::new(AtomicBool::new(false)),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero_init: false,
        }
    }

    /// A store whose tensors all start at zero, for models about to be
    /// overwritten from an archive.
    pub fn zeroed(dtype: DType) -> Self {
        Self {
            zero_init: true,
            ..Self::new(0, dtype)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Detaches every parameter from gradient tracking. Forward results are
    /// unchanged.
    pub fn freeze(&self) {
        self.frozen.store(true, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.param)
    }

    /// Weights an optimiser may update: empty once frozen.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.is_frozen() {
            return Vec::new();
        }
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.param.var.clone())
            .collect()
    }

    /// Named weights (buffers excluded).
    pub fn weights(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| (e.name.clone(), e.param.var.clone()))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.weights().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of every tensor, weights and buffers, in registration order.
    pub fn state(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.param.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every registered tensor from `tensors`; returns the names
    /// loaded. Missing keys and shape mismatches are errors, extra keys are
    /// ignored.
    pub fn load_state(
        &self,
        tensors: &std::collections::BTreeMap<String, Tensor>,
        origin: &std::path::Path,
    ) -> Result<Vec<String>> {
        self.load_mapped(tensors, origin, |name| Some(name.to_string()))
    }

    /// Like [`ParamStore::load_state`] for the entries whose archive key is
    /// given by `key_of`; entries mapped to `None` are left untouched.
    pub fn load_mapped(
        &self,
        tensors: &std::collections::BTreeMap<String, Tensor>,
        origin: &std::path::Path,
        key_of: impl Fn(&str) -> Option<String>,
    ) -> Result<Vec<String>> {
        let mut plan = Vec::new();
        for e in &self.entries {
            let Some(key) = key_of(&e.name) else { continue };
            let t = tensors.get(&key).ok_or_else(|| Error::MissingKey {
                path: origin.to_owned(),
                key: key.clone(),
            })?;
            if t.dims() != e.param.var.dims() {
                return Err(Error::CheckpointShape {
                    path: origin.to_owned(),
                    key,
                    expected: e.param.var.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            plan.push((e, t, key));
        }
        // Validate everything before mutating anything.
        let mut manifest = Vec::with_capacity(plan.len());
        for (e, t, key) in plan {
            e.param.set(&t.to_dtype(self.dtype)?)?;
            manifest.push(key);
        }
        Ok(manifest)
    }

    fn register(&mut self, name: String, value: Tensor, kind: ParamKind) -> Result<Param> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let param = Param {
            var: Var::from_tensor(&value.to_dtype(self.dtype)?)?,
            frozen: self.frozen.clone(),
        };
        self.entries.push(Entry {
            name,
            param: param.clone(),
            kind,
        });
        Ok(param)
    }
}

/// Initialisation recipe for a new tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-bound, bound)`
    Uniform(f64),
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

/// Name prefix into a [`ParamStore`] during model construction.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn sample(&mut self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        if self.store.zero_init {
            return Ok(Tensor::zeros(shape.clone(), self.store.dtype, &Device::Cpu)?);
        }
        let rng = &mut self.store.rng;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let z: f64 = d.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        Ok(Tensor::from_vec(data, shape.clone(), &Device::Cpu)?)
    }

    pub fn weight(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        let shape = shape.into();
        let value = self.sample(&shape, init)?;
        let full = self.full_name(name);
        self.store.register(full, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        let shape = shape.into();
        let value = self.sample(&shape, init)?;
        let full = self.full_name(name);
        self.store.register(full, value, ParamKind::Buffer)
    }
}

/// Kaiming-uniform bound for a rectifier network: `sqrt(6 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
