use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSection, ModelSection};
use crate::baselines::{build_baseline, ModelSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, binarize_logits, evaluate_patient, postprocess_baseline, save_overlay,
    MetricReport, PatientMetrics,
};
use crate::head::{HeadConfig, SegHead};
use crate::imaging::{
    extract_slices, load_corpus, read_manifests, split_patients, to_three_channel,
    BaselinePreprocess, DatasetSplit, SliceSample, VitPreprocess, Volume,
};
use crate::model::{Architecture, Segmenter};
use crate::training::{self, RunDir, SampleSet, TrainConfig, TrainedCheckpoint};
use crate::vit::{FrozenBackbone, VitBackbone};

const DTYPE: DType = DType::F32;

/// Volumes keyed by patient id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    volumes: BTreeMap<String, Volume>,
}

impl Corpus {
    pub fn load(data: &DataSection) -> Result<Self> {
        let volumes = load_corpus(&data.root, &data.image_glob, &data.label_glob)?;
        if volumes.is_empty() {
            return Err(Error::Config(format!(
                "no volumes matching {} in {}",
                data.image_glob,
                data.root.display()
            )));
        }
        Ok(Self::from_volumes(volumes))
    }

    pub fn from_volumes(volumes: Vec<Volume>) -> Self {
        Self {
            volumes: volumes
                .into_iter()
                .map(|v| (v.patient_id().to_string(), v))
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.volumes.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<&Volume> {
        self.volumes
            .get(id)
            .ok_or_else(|| Error::invalid(format!("patient `{id}` is not in the corpus")))
    }

    /// Every slice of the given patients, patient by patient.
    pub fn slices(&self, ids: &[String]) -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for id in ids {
            out.extend(extract_slices(self.get(id)?));
        }
        Ok(out)
    }

    /// SHA-256 over the ids, voxels and labels of `ids`, in order.
    pub fn content_hash(&self, ids: &[String]) -> Result<String> {
        let mut h = Sha256::new();
        for id in ids {
            let v = self.get(id)?;
            h.update(id.as_bytes());
            h.update([0u8]);
            for x in v.voxels().iter() {
                h.update(x.to_le_bytes());
            }
            h.update(v.labels().as_slice_memory_order().unwrap_or(&[]));
            if v.labels().as_slice_memory_order().is_none() {
                for &l in v.labels().iter() {
                    h.update([l]);
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Reads split manifests when given, otherwise splits the corpus by seed.
/// Either way the split must cover only known patients and be disjoint.
pub fn resolve_split(data: &DataSection, corpus: &Corpus) -> Result<DatasetSplit> {
    let split = match &data.split_dir {
        Some(dir) => read_manifests(dir)?,
        None => split_patients(&corpus.ids(), data.split_seed)?,
    };
    split.validate()?;
    for id in split.all_ids() {
        corpus.get(id)?;
    }
    Ok(split)
}

/// Frozen backbone plus a per-slice cache of its token grids.
pub struct VitEncoder {
    backbone: FrozenBackbone,
    prep: VitPreprocess,
    cache: Mutex<HashMap<(String, usize), (Tensor, Tensor)>>,
}

impl VitEncoder {
    pub fn new(backbone: FrozenBackbone, prep: VitPreprocess) -> Self {
        Self {
            backbone,
            prep,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Loads `dinov2_<variant>.safetensors` from the cache directory; a
    /// tiny-test backbone without a checkpoint gets seeded random weights.
    pub fn from_model_section(m: &ModelSection) -> Result<Self> {
        let variant = m.backbone_variant()?;
        let file = m
            .cache_dir()
            .map(|d| d.join(format!("dinov2_{}.safetensors", variant.name)));
        let backbone = match file {
            Some(f) if f.exists() => {
                let (b, manifest) = VitBackbone::load_checkpoint(&f, variant, DTYPE)?;
                log::info!("loaded {} backbone tensors from {}", manifest.len(), f.display());
                b
            }
            _ if variant.name == crate::vit::VariantName::TinyTest => {
                VitBackbone::new(variant, m.backbone_seed, DTYPE)?
            }
            other => {
                return Err(Error::Config(format!(
                    "no checkpoint for the {} backbone (looked for {}); set {}",
                    variant.name,
                    other.map(|p| p.display().to_string()).unwrap_or_else(|| "<unset>".into()),
                    super::config::CACHE_ENV
                )));
            }
        };
        Ok(Self::new(backbone.freeze(), VitPreprocess::new(m.vit_norm)))
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.variant().embed_dim
    }

    /// `(32, 32, D)` grid and `(1, 448, 448)` mask for one slice.
    pub fn encode_slice(&self, s: &SliceSample) -> Result<(Tensor, Tensor)> {
        let key = (s.patient_id.clone(), s.slice_index);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let (img, mask) = self.prep.apply(s);
        let x = array3_to_tensor(&img)?.unsqueeze(0)?;
        let grid = self.backbone.encode(&x)?.0.squeeze(0)?;
        let mask = SampleSet::mask_to_tensor(&mask)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, (grid.clone(), mask.clone()));
        Ok((grid, mask))
    }
}

fn array3_to_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    Ok(Tensor::from_iter(a.iter().copied(), &Device::Cpu)?.reshape((c, h, w))?)
}

fn tensor_to_mask(logits: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = logits.dims2()?;
    let v = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("shape checked"))
}

/// A trainable model together with the preprocessing of its path.
pub enum MethodModel {
    Baseline {
        model: Box<dyn Segmenter>,
        spec: ModelSpec,
        prep: BaselinePreprocess,
    },
    Vit {
        encoder: Arc<VitEncoder>,
        head: SegHead,
    },
}

impl MethodModel {
    pub fn build(
        method: Architecture,
        m: &ModelSection,
        seed: u64,
        encoder: Option<Arc<VitEncoder>>,
    ) -> Result<Self> {
        match method {
            Architecture::VitHead => {
                let encoder = match encoder {
                    Some(e) => e,
                    None => Arc::new(VitEncoder::from_model_section(m)?),
                };
                let cfg = HeadConfig::new(encoder.embed_dim()).with_channels(m.head_channels);
                let head = SegHead::new(cfg, seed, DTYPE)?;
                Ok(Self::Vit { encoder, head })
            }
            arch => {
                let spec = ModelSpec {
                    architecture: arch,
                    input_size: m.baseline_input_size,
                    base_channels: m.base_channels,
                    pretrained_encoder: m.pretrained_encoder && arch == Architecture::Res50Unet,
                };
                let ckpt = m.cache_dir().map(|d| d.join("resnet50.safetensors"));
                let model = build_baseline(&spec, seed, DTYPE, ckpt.as_deref())?;
                Ok(Self::Baseline {
                    model,
                    spec,
                    prep: m.baseline_preprocess(),
                })
            }
        }
    }

    pub fn segmenter(&self) -> &dyn Segmenter {
        match self {
            Self::Baseline { model, .. } => model.as_ref(),
            Self::Vit { head, .. } => head,
        }
    }

    /// Model-ready inputs and masks for `slices`.
    pub fn prepare(&self, slices: &[SliceSample]) -> Result<SampleSet> {
        let mut set = SampleSet::default();
        for s in slices {
            let (x, y) = self.prepare_one(s)?;
            set.push(x, y, s.patient_id.clone());
        }
        Ok(set)
    }

    fn prepare_one(&self, s: &SliceSample) -> Result<(Tensor, Tensor)> {
        match self {
            Self::Baseline { spec, prep, .. } => {
                let (img, mask) = prep.apply(s)?;
                let img = if spec.in_channels() == 3 {
                    to_three_channel(img.view())
                } else {
                    img.insert_axis(ndarray::Axis(0))
                };
                Ok((array3_to_tensor(&img)?, SampleSet::mask_to_tensor(&mask)?))
            }
            Self::Vit { encoder, .. } => encoder.encode_slice(s),
        }
    }

    /// Binary masks at native resolution, one per slice. Baseline masks are
    /// opened and closed; the transformer path is left untouched.
    pub fn predict(&self, slices: &[SliceSample]) -> Result<Vec<Array2<u8>>> {
        if slices.is_empty() {
            return Ok(Vec::new());
        }
        let set = self.prepare(slices)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        let (x, _) = set.batch(&idx, DTYPE)?;
        let logits = self.segmenter().forward(&x, false)?;
        slices
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let l = tensor_to_mask(&logits.get(k)?.squeeze(0)?)?;
                let m = binarize_logits(l.view(), 0.5);
                let (h, w) = s.dim();
                Ok(match self {
                    Self::Baseline { prep, .. } => {
                        postprocess_baseline(prep.restore(m.view(), h, w).view())
                    }
                    Self::Vit { encoder, .. } => encoder.prep.restore(m.view(), h, w),
                })
            })
            .collect()
    }

    pub fn load_state(&self, ckpt: &TrainedCheckpoint, origin: &Path) -> Result<()> {
        let by_name: BTreeMap<String, Tensor> = ckpt.state.iter().cloned().collect();
        self.segmenter().store().load_state(&by_name, origin)?;
        Ok(())
    }
}

/// Per-patient metrics on `ids`, with optional overlays
/// `<patient>_<slice>.png`. Also returns the content hash of the volumes
/// that were scored.
pub fn evaluate_method(
    model: &MethodModel,
    corpus: &Corpus,
    ids: &[String],
    overlays: Option<&Path>,
) -> Result<(Vec<PatientMetrics>, String)> {
    if let Some(dir) = overlays {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    for id in ids {
        let volume = corpus.get(id)?;
        let slices = extract_slices(volume);
        let preds = model.predict(&slices)?;
        let (dice, iou) = evaluate_patient(&preds, volume)?;
        if let Some(dir) = overlays {
            for (s, p) in slices.iter().zip(&preds) {
                let path = dir.join(format!("{}_{}.png", s.patient_id, s.slice_index));
                save_overlay(&path, s.image.view(), p.view(), s.mask.view())?;
            }
        }
        rows.push(PatientMetrics {
            patient_id: id.clone(),
            dice,
            iou,
        });
    }
    Ok((rows, corpus.content_hash(ids)?))
}

/// Everything a run directory needs to rebuild its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Architecture,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub train_patients: Vec<String>,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub struct TrainOutcome {
    pub model: MethodModel,
    pub checkpoint: TrainedCheckpoint,
}

/// Trains `method` on `train_slices`, validating on the split's validation
/// patients; the test patients are never read. Writes a run directory when
/// `run_dir` is given.
#[allow(clippy::too_many_arguments)]
pub fn train_method(
    method: Architecture,
    data: &DataSection,
    model_section: &ModelSection,
    corpus: &Corpus,
    split: &DatasetSplit,
    train_slices: &[SliceSample],
    cfg: &TrainConfig,
    encoder: Option<Arc<VitEncoder>>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    audit_held_out(split, train_slices)?;
    let model = MethodModel::build(method, model_section, cfg.seed, encoder)?;
    let train_set = model.prepare(train_slices)?;
    let val_set = model.prepare(&corpus.slices(&split.val_ids)?)?;
    let mut checkpoint = training::train(model.segmenter(), &train_set, &val_set, cfg)?;
    checkpoint
        .extra
        .insert("architecture".into(), method.to_string());
    if let Some(dir) = run_dir {
        let mut patients: Vec<String> =
            train_slices.iter().map(|s| s.patient_id.clone()).collect();
        patients.dedup();
        let rc = RunConfig {
            method,
            data: data.clone(),
            model: model_section.clone(),
            train: cfg.clone(),
            train_patients: patients,
        };
        RunDir::create(dir)?.save(&rc.to_toml()?, &checkpoint)?;
    }
    Ok(TrainOutcome { model, checkpoint })
}

/// No training slice may come from a test patient.
fn audit_held_out(split: &DatasetSplit, train_slices: &[SliceSample]) -> Result<()> {
    let leaked: Vec<&str> = train_slices
        .iter()
        .map(|s| s.patient_id.as_str())
        .filter(|id| split.test_ids.iter().any(|t| t == id) || split.val_ids.iter().any(|v| v == id))
        .collect();
    if let Some(id) = leaked.first() {
        return Err(Error::invalid(format!(
            "training data contains held-out patient `{id}`"
        )));
    }
    Ok(())
}

/// Rebuilds a trained model from its run directory.
pub fn load_run(run: &Path) -> Result<(RunConfig, MethodModel)> {
    let dir = RunDir::open(run);
    let rc = RunConfig::from_toml(&dir.read_config()?)?;
    let ckpt = training::load_checkpoint(&dir.checkpoint_path())?;
    let model = MethodModel::build(rc.method, &rc.model, rc.train.seed, None)?;
    model.load_state(&ckpt, &dir.checkpoint_path())?;
    Ok((rc, model))
}

/// Scores a run directory on the split's test patients.
pub fn evaluate_run(
    run: &Path,
    data: &DataSection,
    overlays: Option<&Path>,
) -> Result<MetricReport> {
    let (rc, model) = load_run(run)?;
    let corpus = Corpus::load(data)?;
    let split = resolve_split(data, &corpus)?;
    let (rows, _) = evaluate_method(&model, &corpus, &split.test_ids, overlays)?;
    aggregate(rc.method.to_string(), rows)
}

pub fn default_run_name(method: Architecture, seed: u64) -> PathBuf {
    PathBuf::from(format!("{method}_seed{seed}"))
}
