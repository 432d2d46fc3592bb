//! Binarisation, post-processing, overlap metrics and reports.

mod metrics;
mod morphology;
mod overlay;
mod report;

use ndarray::{Array2, Axis};

pub use metrics::{binarize_logits, binarize_probabilities, dice, iou, sigmoid, Overlap};
pub use morphology::{
    dilate, erode, morph_close, morph_open, postprocess_baseline, StructuringElement,
};
pub use overlay::{render_overlay, save_overlay, tint_counts, AGREE, GT_ONLY, PRED_ONLY};
pub use report::{aggregate, mean_sd, MetricReport, PatientMetrics, MEAN_ROW, SD_ROW};

use crate::error::{Error, Result};
use crate::imaging::Volume;

/// Volumetric Dice and IoU of per-slice predictions at native resolution.
pub fn evaluate_patient(preds: &[Array2<u8>], gt: &Volume) -> Result<(f64, f64)> {
    let (h, w, s) = gt.dim();
    if preds.len() != s {
        return Err(Error::invalid(format!(
            "{}: {} predicted slices for {s} label slices",
            gt.patient_id(),
            preds.len()
        )));
    }
    let mut total = Overlap::default();
    for (k, p) in preds.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::shape("predicted slice", p.shape(), &[h, w]));
        }
        total = total.merge(Overlap::of(p, &gt.labels().index_axis(Axis(2), k))?);
    }
    Ok((total.dice(), total.iou()))
}
