//! Loss, optimisation loop, early stopping and checkpoint selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Overlap;
use crate::model::{Architecture, Segmenter};
use crate::nn::{archive, ops};

/// Mean binary cross-entropy on logits, `mean(softplus(l) - l * y)`.
///
/// `softplus(l) = max(l, 0) + log(1 + exp(-|l|))`, so this is the usual fused
/// stable form; its gradient is exactly `(sigmoid(l) - y) / N`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::shape("logits vs targets", logits.dims(), targets.dims()));
    }
    let targets = targets.to_dtype(logits.dtype())?;
    let off_binary = (&targets * (&targets - 1.0)?)?
        .abs()?
        .max_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if off_binary != 0.0 {
        return Err(Error::invalid("targets must be 0 or 1"));
    }
    Ok((ops::softplus(logits)? - (logits * &targets)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValDice,
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Architecture,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub early_stop_metric: EarlyStopMetric,
}

impl TrainConfig {
    pub fn defaults(method: Architecture) -> Self {
        let (learning_rate, batch_size, max_epochs) = match method {
            Architecture::VitHead => (1e-3, 32, 35),
            _ => (1e-4, 24, 75),
        };
        Self {
            method,
            learning_rate,
            batch_size,
            max_epochs,
            patience: 10,
            seed: 0,
            early_stop_metric: EarlyStopMetric::ValDice,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, patience and max_epochs must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Patience-based stopping on a validation metric.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    metric: EarlyStopMetric,
    patience: usize,
    best: Option<(usize, f64)>,
    epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(metric: EarlyStopMetric, patience: usize) -> Self {
        Self {
            metric,
            patience,
            best: None,
            epoch: 0,
            stale: 0,
        }
    }

    fn better(&self, value: f64, than: f64) -> bool {
        match self.metric {
            EarlyStopMetric::ValDice => value > than,
            EarlyStopMetric::ValLoss => value < than,
        }
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        self.epoch += 1;
        let improved = value.is_finite()
            && self.best.is_none_or(|(_, b)| self.better(value, b));
        if improved {
            self.best = Some((self.epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    /// `(epoch, value)`, epochs counted from 1.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Preprocessed inputs and masks, one entry per slice.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    /// Model inputs without the batch axis.
    pub inputs: Vec<Tensor>,
    /// `(1, H, W)` binary masks at model resolution, stored as `u8`.
    pub targets: Vec<Tensor>,
    pub patient_ids: Vec<String>,
}

impl SampleSet {
    pub fn push(&mut self, input: Tensor, target: Tensor, patient_id: impl Into<String>) {
        self.inputs.push(input);
        self.targets.push(target);
        self.patient_ids.push(patient_id.into());
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn mask_to_tensor(mask: &Array2<u8>) -> Result<Tensor> {
        let (h, w) = mask.dim();
        Ok(Tensor::from_iter(mask.iter().copied(), &candle_core::Device::Cpu)?.reshape((1, h, w))?)
    }

    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let x: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let y: Vec<&Tensor> = idx.iter().map(|&i| &self.targets[i]).collect();
        Ok((
            Tensor::stack(&x, 0)?.to_dtype(dtype)?,
            Tensor::stack(&y, 0)?.to_dtype(dtype)?,
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> SampleSet {
        let mut s = SampleSet::default();
        for &i in idx {
            s.push(self.inputs[i].clone(), self.targets[i].clone(), self.patient_ids[i].clone());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

pub struct TrainedCheckpoint {
    pub state: Vec<(String, Tensor)>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub metric: EarlyStopMetric,
    pub history: Vec<EpochRecord>,
    /// Free-form string metadata carried into the archive.
    pub extra: BTreeMap<String, String>,
}

/// Validation loss and mean per-patient Dice at model resolution.
pub fn evaluate_set(model: &dyn Segmenter, set: &SampleSet, batch_size: usize) -> Result<(f64, f64)> {
    let dtype = model.store().dtype();
    let mut loss_sum = 0.0;
    let mut per_patient: BTreeMap<&str, Overlap> = BTreeMap::new();
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk, dtype)?;
        let logits = model.forward(&x, false)?;
        let loss = bce_with_logits(&logits, &y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        loss_sum += loss * chunk.len() as f64;
        // sigmoid(l) >= 0.5 exactly when l >= 0
        let pred = logits.ge(0.0)?;
        let truth = y.to_dtype(DType::U8)?;
        for (k, &i) in chunk.iter().enumerate() {
            let p = pred.get(k)?.flatten_all()?.to_vec1::<u8>()?;
            let t = truth.get(k)?.flatten_all()?.to_vec1::<u8>()?;
            let o = Overlap::of(
                &ndarray::Array1::from(p),
                &ndarray::Array1::from(t),
            )?;
            let e = per_patient.entry(set.patient_ids[i].as_str()).or_default();
            *e = e.merge(o);
        }
    }
    let n = set.len().max(1) as f64;
    let dice = if per_patient.is_empty() {
        f64::NAN
    } else {
        per_patient.values().map(|o| o.dice()).sum::<f64>() / per_patient.len() as f64
    };
    Ok((loss_sum / n, dice))
}

/// Trains the model's trainable parameters and leaves it holding the best
/// epoch's weights.
pub fn train(
    model: &dyn Segmenter,
    train_set: &SampleSet,
    val_set: &SampleSet,
    cfg: &TrainConfig,
) -> Result<TrainedCheckpoint> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    let store = model.store();
    let dtype = store.dtype();
    let mut opt = AdamW::new(
        store.trainable_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.early_stop_metric, cfg.patience);
    let mut history = Vec::new();
    let mut best_state = store.state()?;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk, dtype)?;
            let logits = model.forward(&x, true)?;
            let loss = bce_with_logits(&logits, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_dice) = evaluate_set(model, val_set, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
        });
        let metric = match cfg.early_stop_metric {
            EarlyStopMetric::ValDice => val_dice,
            EarlyStopMetric::ValLoss => val_loss,
        };
        let decision = stopper.observe(metric);
        log::info!(
            "{} epoch {epoch}: train_loss {train_loss:.5} val_loss {val_loss:.5} val_dice {val_dice:.4}{}",
            cfg.method,
            if decision.improved { " *" } else { "" }
        );
        if decision.improved {
            best_state = store.state()?;
        }
        if decision.stop {
            break;
        }
    }

    let (best_epoch, best_val_metric) = stopper.best().unwrap_or((0, f64::NAN));
    let by_name: BTreeMap<String, Tensor> = best_state.iter().cloned().collect();
    store.load_state(&by_name, Path::new("<best epoch>"))?;
    Ok(TrainedCheckpoint {
        state: best_state,
        best_epoch,
        best_val_metric,
        metric: cfg.early_stop_metric,
        history,
        extra: BTreeMap::new(),
    })
}

const META_BEST_EPOCH: &str = "best_epoch";
const META_BEST_METRIC: &str = "best_val_metric";
const META_METRIC: &str = "early_stop_metric";
const META_HISTORY: &str = "history";

pub fn save_checkpoint(ckpt: &TrainedCheckpoint, path: &Path) -> Result<()> {
    let mut meta = ckpt.extra.clone();
    meta.insert(META_BEST_EPOCH.into(), ckpt.best_epoch.to_string());
    meta.insert(META_BEST_METRIC.into(), ckpt.best_val_metric.to_string());
    meta.insert(
        META_METRIC.into(),
        serde_json::to_string(&ckpt.metric).map_err(|e| Error::invalid(e.to_string()))?,
    );
    meta.insert(
        META_HISTORY.into(),
        serde_json::to_string(&ckpt.history).map_err(|e| Error::invalid(e.to_string()))?,
    );
    archive::save(path, &ckpt.state, &meta)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedCheckpoint> {
    let ar = archive::load(path)?;
    let bad = |what: &str| Error::Archive {
        path: path.to_owned(),
        message: format!("missing or malformed `{what}` metadata"),
    };
    let mut extra = ar.metadata.clone();
    let mut take = |k: &str| extra.remove(k).ok_or_else(|| bad(k));
    let best_epoch = take(META_BEST_EPOCH)?.parse().map_err(|_| bad(META_BEST_EPOCH))?;
    let best_val_metric = take(META_BEST_METRIC)?.parse().map_err(|_| bad(META_BEST_METRIC))?;
    let metric = serde_json::from_str(&take(META_METRIC)?).map_err(|_| bad(META_METRIC))?;
    let history = serde_json::from_str(&take(META_HISTORY)?).map_err(|_| bad(META_HISTORY))?;
    Ok(TrainedCheckpoint {
        state: ar.tensors.into_iter().collect(),
        best_epoch,
        best_val_metric,
        metric,
        history,
        extra,
    })
}

/// `<root>/config`, `<root>/history.csv` and `<root>/best.ckpt`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        let p = self.config_path();
        archive::write_atomic(&p, text.as_bytes())
    }

    pub fn read_config(&self) -> Result<String> {
        let p = self.config_path();
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn write_history(&self, history: &[EpochRecord]) -> Result<()> {
        let p = self.history_path();
        let mut w = csv::Writer::from_path(&p)?;
        for r in history {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn read_history(&self) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(self.history_path())?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn save(&self, config_text: &str, ckpt: &TrainedCheckpoint) -> Result<()> {
        self.write_config(config_text)?;
        self.write_history(&ckpt.history)?;
        save_checkpoint(ckpt, &self.checkpoint_path())
    }
}
