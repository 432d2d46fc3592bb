//! Volume ingestion, slice extraction, preprocessing, patient splits,
//! few-shot subsets and the synthetic phantom corpus.

mod nifti_io;
mod phantom;
mod preprocess;
pub mod resample;
mod split;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub use nifti_io::{discover_pairs, load_corpus, load_volume, save_volume, VolumePair};
pub use phantom::{generate_phantom, write_phantom, PhantomSpec};
pub use preprocess::{
    to_three_channel, BaselinePreprocess, OversizePolicy, VitNorm, VitPreprocess, IMAGENET_MEAN,
    IMAGENET_STD, VIT_INPUT_SIZE,
};
pub use split::{
    read_manifests, split_patients, subset_by_fraction, subset_by_patients, write_manifests,
    DatasetSplit,
};

/// A patient's 3D intensity grid with its binary left-atrium label grid.
///
/// Axes are `(height, width, slices)`. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    labels: Array3<u8>,
    patient_id: String,
    spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        voxels: Array3<f32>,
        labels: Array3<u8>,
        spacing: Option<[f32; 3]>,
    ) -> Result<Self> {
        if voxels.shape() != labels.shape() {
            return Err(Error::shape(
                "volume voxels vs labels",
                voxels.shape(),
                labels.shape(),
            ));
        }
        if voxels.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "volume has an empty axis: {:?}",
                voxels.shape()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("labels must be binary"));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("voxel intensities must be finite"));
        }
        Ok(Self {
            voxels,
            labels,
            patient_id: patient_id.into(),
            spacing,
        })
    }

    /// Rebuilds a volume from its ordered slices (inverse of [`extract_slices`]).
    pub fn stack(
        patient_id: impl Into<String>,
        slices: &[SliceSample],
        spacing: Option<[f32; 3]>,
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero slices"))?;
        let (h, w) = first.image.dim();
        let mut voxels = Array3::zeros((h, w, slices.len()));
        let mut labels = Array3::zeros((h, w, slices.len()));
        for (k, s) in slices.iter().enumerate() {
            if s.image.dim() != (h, w) {
                return Err(Error::shape(
                    "stacked slice",
                    s.image.shape(),
                    first.image.shape(),
                ));
            }
            voxels.slice_mut(s![.., .., k]).assign(&s.image);
            labels.slice_mut(s![.., .., k]).assign(&s.mask);
        }
        Self::new(patient_id, voxels, labels, spacing)
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn spacing(&self) -> Option<[f32; 3]> {
        self.spacing
    }

    /// `(height, width, slices)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.len_of(Axis(2))
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.labels.iter().filter(|&&v| v == 1).count();
        fg as f64 / self.labels.len() as f64
    }
}

/// One 2D image/mask pair, the unit the models train on.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub patient_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn new(
        image: Array2<f32>,
        mask: Array2<u8>,
        patient_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        if image.dim() != mask.dim() {
            return Err(Error::shape("slice image vs mask", image.shape(), mask.shape()));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::invalid("slice mask must be binary"));
        }
        Ok(Self {
            image,
            mask,
            patient_id: patient_id.into(),
            slice_index,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn image_view(&self) -> ArrayView2<'_, f32> {
        self.image.view()
    }
}

/// Splits a volume into its axial slices, ordered by slice index.
///
/// Slices with empty masks are kept.
pub fn extract_slices(volume: &Volume) -> Vec<SliceSample> {
    (0..volume.n_slices())
        .map(|k| SliceSample {
            image: volume.voxels.slice(s![.., .., k]).to_owned(),
            mask: volume.labels.slice(s![.., .., k]).to_owned(),
            patient_id: volume.patient_id.clone(),
            slice_index: k,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume(h: usize, w: usize, d: usize) -> Volume {
        let voxels = Array3::from_shape_fn((h, w, d), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let labels = Array3::from_shape_fn((h, w, d), |(i, j, _)| ((i + j) % 2) as u8);
        Volume::new("p0", voxels, labels, None).unwrap()
    }

    #[test]
    fn forty_four_slices_give_forty_four_samples() {
        let v = volume(4, 5, 44);
        let slices = extract_slices(&v);
        assert_eq!(slices.len(), 44);
        for (k, s) in slices.iter().enumerate() {
            assert_eq!(s.slice_index, k);
            assert_eq!(s.image, v.voxels().slice(s![.., .., k]));
        }
    }

    #[test]
    fn empty_label_slices_are_retained() {
        let v = Volume::new(
            "empty",
            Array3::ones((6, 6, 3)),
            Array3::zeros((6, 6, 3)),
            None,
        )
        .unwrap();
        let slices = extract_slices(&v);
        assert_eq!(slices.len(), 3);
        assert!(slices.iter().all(|s| s.mask.iter().all(|&m| m == 0)));
    }

    #[test]
    fn rejects_mismatched_and_invalid_volumes() {
        assert!(matches!(
            Volume::new("x", Array3::zeros((2, 2, 2)), Array3::zeros((2, 3, 2)), None),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut labels = Array3::zeros((2, 2, 2));
        labels[[0, 0, 0]] = 2;
        assert!(Volume::new("x", Array3::zeros((2, 2, 2)), labels, None).is_err());
        let mut voxels = Array3::zeros((2, 2, 2));
        voxels[[1, 1, 1]] = f32::NAN;
        assert!(Volume::new("x", voxels, Array3::zeros((2, 2, 2)), None).is_err());
    }

    proptest! {
        #[test]
        fn stack_inverts_extract(h in 1usize..8, w in 1usize..8, d in 1usize..6, seed in 0u32..1000) {
            let voxels = Array3::from_shape_fn((h, w, d), |(i, j, k)| {
                ((i * 31 + j * 17 + k * 7) as u32 ^ seed) as f32 * 0.25
            });
            let labels = Array3::from_shape_fn((h, w, d), |(i, j, k)| ((i + j + k + seed as usize) % 3 == 0) as u8);
            let v = Volume::new("p", voxels, labels, Some([1.0, 1.0, 2.5])).unwrap();
            let back = Volume::stack("p", &extract_slices(&v), Some([1.0, 1.0, 2.5])).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
