use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::Volume;
use crate::error::{Error, Result};

fn read_array(path: &Path) -> Result<(Array3<f32>, NiftiHeader)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let nifti_err = |e: nifti::NiftiError| Error::Nifti {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err)?;
    // Trailing singleton axes (e.g. a 4D file with one frame) are tolerated.
    let mut arr = arr;
    while arr.ndim() > 3 && arr.shape()[arr.ndim() - 1] == 1 {
        let last = ndarray::Axis(arr.ndim() - 1);
        arr = arr.index_axis_move(last, 0);
    }
    let ndim = arr.ndim();
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Dimensionality {
            path: path.to_owned(),
            ndim,
        })?;
    Ok((arr, header))
}

/// Loads an image/label pair. Label voxels are binarised with `> 0.5`.
pub fn load_volume(image_path: &Path, label_path: &Path) -> Result<Volume> {
    let (voxels, header) = read_array(image_path)?;
    let (labels, _) = read_array(label_path)?;
    if voxels.shape() != labels.shape() {
        return Err(Error::shape(
            format!("{} vs {}", image_path.display(), label_path.display()),
            voxels.shape(),
            labels.shape(),
        ));
    }
    let labels = labels.mapv(|v| (v > 0.5) as u8);
    let spacing = {
        let p = header.pixdim;
        (p[1] > 0.0 && p[2] > 0.0 && p[3] > 0.0).then_some([p[1], p[2], p[3]])
    };
    let id = patient_id_from(image_path);
    Volume::new(id, voxels, labels, spacing)
}

fn patient_id_from(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    let name = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(name);
    name.strip_suffix("_image").unwrap_or(name).to_string()
}

/// Writes the intensity grid as float32 and the labels as uint8.
pub fn save_volume(volume: &Volume, image_path: &Path, label_path: &Path) -> Result<()> {
    let mut header = NiftiHeader::default();
    if let Some([a, b, c]) = volume.spacing() {
        header.pixdim = [1.0, a, b, c, 1.0, 1.0, 1.0, 1.0];
    }
    let write_err = |path: &Path| {
        let path = path.to_owned();
        move |e: nifti::NiftiError| Error::Nifti {
            path,
            message: e.to_string(),
        }
    };
    WriterOptions::new(image_path)
        .reference_header(&header)
        .write_nifti(volume.voxels())
        .map_err(write_err(image_path))?;
    WriterOptions::new(label_path)
        .reference_header(&header)
        .write_nifti(volume.labels())
        .map_err(write_err(label_path))?;
    Ok(())
}

/// An image/label file pair found on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumePair {
    pub patient_id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

fn split_pattern(pattern: &str) -> Result<(&str, &str)> {
    let mut parts = pattern.splitn(2, '*');
    let prefix = parts.next().unwrap_or("");
    let suffix = parts
        .next()
        .ok_or_else(|| Error::Config(format!("pattern `{pattern}` needs one `*`")))?;
    if suffix.contains('*') {
        return Err(Error::Config(format!(
            "pattern `{pattern}` must contain exactly one `*`"
        )));
    }
    Ok((prefix, suffix))
}

/// Pairs image and label files in `dir`. The text matched by the image
/// pattern's `*` is the patient id and must also resolve the label pattern.
pub fn discover_pairs(dir: &Path, image_glob: &str, label_glob: &str) -> Result<Vec<VolumePair>> {
    let (img_pre, img_suf) = split_pattern(image_glob)?;
    let (lbl_pre, lbl_suf) = split_pattern(label_glob)?;
    let pattern = dir.join(image_glob);
    let pattern = pattern.to_string_lossy();
    let paths = glob::glob(&pattern).map_err(|e| Error::Config(e.to_string()))?;
    let mut pairs = Vec::new();
    for entry in paths {
        let image = entry.map_err(|e| {
            let path = e.path().to_owned();
            Error::io(path, std::io::Error::from(e))
        })?;
        let Some(name) = image.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(id) = name
            .strip_prefix(img_pre)
            .and_then(|n| n.strip_suffix(img_suf))
        else {
            continue;
        };
        let label = dir.join(format!("{lbl_pre}{id}{lbl_suf}"));
        if !label.exists() {
            return Err(Error::io(
                label,
                std::io::Error::new(std::io::ErrorKind::NotFound, "label for image missing"),
            ));
        }
        pairs.push(VolumePair {
            patient_id: id.to_string(),
            image,
            label,
        });
    }
    pairs.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(pairs)
}

/// Loads every discovered pair, keyed by the discovered patient id.
pub fn load_corpus(dir: &Path, image_glob: &str, label_glob: &str) -> Result<Vec<Volume>> {
    discover_pairs(dir, image_glob, label_glob)?
        .into_iter()
        .map(|p| {
            let v = load_volume(&p.image, &p.label)?;
            Volume::new(
                p.patient_id,
                v.voxels().clone(),
                v.labels().clone(),
                v.spacing(),
            )
        })
        .collect()
}
