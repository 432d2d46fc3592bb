use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode, SweepValue};
use super::pipeline::{evaluate_method, resolve_split, train_method, Corpus, VitEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, MetricReport};
use crate::imaging::{subset_by_fraction, subset_by_patients, DatasetSplit, SliceSample};
use crate::model::Architecture;

/// One trained-and-evaluated (method, value, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Architecture,
    /// `None` in a full comparison.
    pub value: Option<SweepValue>,
    pub seed: u64,
    /// Numeric position on the sweep axis.
    pub x: f64,
    pub n_train_slices: usize,
    pub report: Option<MetricReport>,
    pub test_split_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub mode: Mode,
    pub cells: Vec<CellResult>,
    pub provenance: Provenance,
}

/// A row of the comparison table: per-seed statistics averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Architecture,
    pub n_seeds: usize,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_sd: Option<f64>,
    pub test_split_hash: Option<String>,
    pub error: Option<String>,
}

/// A row of the long-form sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Architecture,
    pub mode: Mode,
    pub value: String,
    pub seed: u64,
    pub x: f64,
    pub n_train_slices: usize,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_sd: Option<f64>,
    pub test_split_hash: Option<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ExperimentResult {
    pub fn comparison_rows(&self) -> Vec<ComparisonRow> {
        let mut methods: Vec<Architecture> = self.cells.iter().map(|c| c.method).collect();
        methods.dedup();
        methods
            .into_iter()
            .map(|method| {
                let cells: Vec<&CellResult> =
                    self.cells.iter().filter(|c| c.method == method).collect();
                let reports: Vec<&MetricReport> =
                    cells.iter().filter_map(|c| c.report.as_ref()).collect();
                let errors: Vec<String> = cells
                    .iter()
                    .filter_map(|c| c.error.as_ref().map(|e| format!("seed {}: {e}", c.seed)))
                    .collect();
                let avg = |f: fn(&MetricReport) -> f64| {
                    (!reports.is_empty())
                        .then(|| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64)
                };
                ComparisonRow {
                    method,
                    n_seeds: reports.len(),
                    dice_mean: avg(|r| r.dice_mean),
                    dice_sd: avg(|r| r.dice_sd),
                    iou_mean: avg(|r| r.iou_mean),
                    iou_sd: avg(|r| r.iou_sd),
                    test_split_hash: cells.iter().find_map(|c| c.test_split_hash.clone()),
                    error: (!errors.is_empty()).then(|| errors.join("; ")),
                }
            })
            .collect()
    }

    pub fn sweep_rows(&self) -> Vec<SweepRow> {
        self.cells
            .iter()
            .map(|c| SweepRow {
                method: c.method,
                mode: self.mode,
                value: c.value.map(|v| v.label()).unwrap_or_else(|| "full".into()),
                seed: c.seed,
                x: c.x,
                n_train_slices: c.n_train_slices,
                dice_mean: c.report.as_ref().map(|r| r.dice_mean),
                dice_sd: c.report.as_ref().map(|r| r.dice_sd),
                iou_mean: c.report.as_ref().map(|r| r.iou_mean),
                iou_sd: c.report.as_ref().map(|r| r.iou_sd),
                test_split_hash: c.test_split_hash.clone(),
                error: c.error.clone(),
            })
            .collect()
    }

    /// True when every successful cell was scored on the same test data.
    pub fn test_split_consistent(&self) -> bool {
        let mut hashes = self.cells.iter().filter_map(|c| c.test_split_hash.as_ref());
        match hashes.next() {
            Some(first) => hashes.all(|h| h == first),
            None => true,
        }
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Loaded data and the lazily built, shared feature extractor.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    corpus: Corpus,
    split: DatasetSplit,
    train_slices: Vec<SliceSample>,
    encoder: Option<std::result::Result<Arc<VitEncoder>, String>>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::load(&cfg.data)?;
        let split = resolve_split(&cfg.data, &corpus)?;
        let train_slices = corpus.slices(&split.train_ids)?;
        Ok(Self {
            cfg,
            corpus,
            split,
            train_slices,
            encoder: None,
        })
    }

    fn encoder(&mut self, method: Architecture) -> Result<Option<Arc<VitEncoder>>> {
        if method != Architecture::VitHead {
            return Ok(None);
        }
        let model = &self.cfg.model;
        let e = self.encoder.get_or_insert_with(|| {
            VitEncoder::from_model_section(model)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
        e.clone().map(Some).map_err(Error::Config)
    }

    /// Trains and scores one cell; panics and errors become error cells.
    fn run_cell(
        &mut self,
        method: Architecture,
        seed: u64,
        value: Option<SweepValue>,
        epoch_cap: Option<usize>,
        run_dir: Option<PathBuf>,
    ) -> CellResult {
        let mut cell = CellResult {
            method,
            value,
            seed,
            x: 0.0,
            n_train_slices: 0,
            report: None,
            test_split_hash: None,
            error: None,
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<_> {
            let (x, subset) = self.subset(value, seed)?;
            cell.x = x;
            cell.n_train_slices = subset.len();
            let mut tc = self.cfg.train_config(method, seed);
            if let Some(cap) = epoch_cap {
                tc.max_epochs = tc.max_epochs.min(cap);
            }
            let encoder = self.encoder(method)?;
            let out = train_method(
                method,
                &self.cfg.data,
                &self.cfg.model,
                &self.corpus,
                &self.split,
                &subset,
                &tc,
                encoder,
                run_dir.as_deref(),
            )?;
            let (rows, hash) =
                evaluate_method(&out.model, &self.corpus, &self.split.test_ids, None)?;
            Ok((aggregate(method.to_string(), rows)?, hash))
        }));
        match outcome {
            Ok(Ok((report, hash))) => {
                cell.report = Some(report);
                cell.test_split_hash = Some(hash);
            }
            Ok(Err(e)) => cell.error = Some(e.to_string()),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown panic".into());
                cell.error = Some(format!("panic: {msg}"));
            }
        }
        if let Some(e) = &cell.error {
            log::warn!("{method} seed {seed} {:?} failed: {e}", value.map(|v| v.label()));
        }
        cell
    }

    /// Training slices of one sweep cell and its numeric axis position.
    fn subset(&self, value: Option<SweepValue>, seed: u64) -> Result<(f64, Vec<SliceSample>)> {
        let all = &self.train_slices;
        let n_patients = self.split.train_ids.len();
        match (self.cfg.experiment.mode, value) {
            (Mode::Full, _) | (_, None) => Ok((1.0, all.clone())),
            (Mode::FractionSweep, Some(SweepValue::All(_))) => Ok((1.0, all.clone())),
            (Mode::FractionSweep, Some(SweepValue::Number(f))) => {
                Ok((f, subset_by_fraction(all, f, seed)?))
            }
            (Mode::PatientSweep, Some(SweepValue::All(_))) => Ok((n_patients as f64, all.clone())),
            (Mode::PatientSweep, Some(SweepValue::Number(k))) => {
                Ok((k, subset_by_patients(all, k as usize, seed)?))
            }
        }
    }
}

fn prepare_out(out: Option<&Path>, cfg: &ExperimentConfig) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_provenance(out: Option<&Path>, p: &Provenance) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join("provenance.json");
        let text = serde_json::to_string_pretty(p).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Per-patient tables as `reports/<method>[_<value>]_seed<k>.csv`.
fn write_cell_reports(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    for c in &result.cells {
        if let Some(r) = &c.report {
            let value = c.value.map(|v| format!("_{}", v.label())).unwrap_or_default();
            r.write_csv(&reports.join(format!("{}{value}_seed{}.csv", c.method, c.seed)))?;
        }
    }
    Ok(())
}

/// Trains every method on the full training split for every seed and
/// scores it on the test split. With `out`, writes `comparison.csv`,
/// per-cell reports, run directories and provenance.
pub fn run_full_comparison(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    let started = now();
    let mut ctx = Context::new(cfg)?;
    prepare_out(out, cfg)?;
    let mut cells = Vec::new();
    for &method in &cfg.experiment.methods {
        for &seed in &cfg.experiment.seeds {
            let run_dir = out.map(|d| d.join("runs").join(format!("{method}_seed{seed}")));
            cells.push(ctx.run_cell(method, seed, None, None, run_dir));
        }
    }
    let result = ExperimentResult {
        mode: Mode::Full,
        cells,
        provenance: Provenance {
            config_hash: cfg.hash()?,
            started_unix: started,
            finished_unix: now(),
        },
    };
    if let Some(dir) = out {
        write_cell_reports(dir, &result)?;
        write_rows(&dir.join("comparison.csv"), &result.comparison_rows())?;
    }
    write_provenance(out, &result.provenance)?;
    Ok(result)
}

/// Sweeps training-set size over the configured values. Sweep cells train
/// for at most `fewshot_max_epochs` epochs and are always scored on the
/// untouched test split. With `out`, writes `fewshot.csv`, per-cell reports, the plot files
/// and provenance.
pub fn run_fewshot(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    let mode = cfg.experiment.mode;
    if mode == Mode::Full {
        return Err(Error::Config("few-shot runs need a sweep mode".into()));
    }
    let started = now();
    let mut ctx = Context::new(cfg)?;
    prepare_out(out, cfg)?;
    let cap = Some(cfg.experiment.fewshot_max_epochs);
    let mut cells = Vec::new();
    for &method in &cfg.experiment.methods {
        for &value in &cfg.experiment.values {
            for &seed in &cfg.experiment.seeds {
                let run_dir = out.map(|d| {
                    d.join("runs")
                        .join(format!("{method}_{}_seed{seed}", value.label()))
                });
                cells.push(ctx.run_cell(method, seed, Some(value), cap, run_dir));
            }
        }
    }
    let result = ExperimentResult {
        mode,
        cells,
        provenance: Provenance {
            config_hash: cfg.hash()?,
            started_unix: started,
            finished_unix: now(),
        },
    };
    if !result.test_split_consistent() {
        return Err(Error::invalid("test split changed between sweep cells"));
    }
    if let Some(dir) = out {
        write_cell_reports(dir, &result)?;
        write_rows(&dir.join("fewshot.csv"), &result.sweep_rows())?;
        super::plots::emit_plots(&result, dir)?;
    }
    write_provenance(out, &result.provenance)?;
    Ok(result)
}
