use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MEAN_ROW: &str = "__mean__";
pub const SD_ROW: &str = "__sd__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub per_patient: Vec<PatientMetrics>,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub iou_mean: f64,
    pub iou_sd: f64,
}

/// Mean and sample standard deviation (`n - 1`); the SD of one value is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Summarises per-patient rows, sorted by patient id.
pub fn aggregate(method: impl Into<String>, mut rows: Vec<PatientMetrics>) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot aggregate zero patients"));
    }
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let iou: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let (dice_mean, dice_sd) = mean_sd(&dice);
    let (iou_mean, iou_sd) = mean_sd(&iou);
    Ok(MetricReport {
        method: method.into(),
        per_patient: rows,
        dice_mean,
        dice_sd,
        iou_mean,
        iou_sd,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    method: String,
    patient_id: String,
    dice: f64,
    iou: f64,
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut push = |id: &str, dice: f64, iou: f64| {
            w.serialize(Row {
                method: self.method.clone(),
                patient_id: id.to_string(),
                dice,
                iou,
            })
        };
        for r in &self.per_patient {
            push(&r.patient_id, r.dice, r.iou)?;
        }
        push(MEAN_ROW, self.dice_mean, self.iou_mean)?;
        push(SD_ROW, self.dice_sd, self.iou_sd)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut method = None;
        let mut per_patient = Vec::new();
        let (mut mean, mut sd) = (None, None);
        for row in r.deserialize::<Row>() {
            let row = row?;
            method.get_or_insert_with(|| row.method.clone());
            match row.patient_id.as_str() {
                MEAN_ROW => mean = Some((row.dice, row.iou)),
                SD_ROW => sd = Some((row.dice, row.iou)),
                _ => per_patient.push(PatientMetrics {
                    patient_id: row.patient_id,
                    dice: row.dice,
                    iou: row.iou,
                }),
            }
        }
        let missing = |what: &str| Error::invalid(format!("{}: no {what} row", path.display()));
        let (dice_mean, iou_mean) = mean.ok_or_else(|| missing(MEAN_ROW))?;
        let (dice_sd, iou_sd) = sd.ok_or_else(|| missing(SD_ROW))?;
        Ok(Self {
            method: method.ok_or_else(|| missing("data"))?,
            per_patient,
            dice_mean,
            dice_sd,
            iou_mean,
            iou_sd,
        })
    }
}
