//! Inference on raw volumes: segmentation masks back on the source grid
//! plus a class table.

use std::path::{Path, PathBuf};

use crate::data::dataset::{read_volume, write_file};
use crate::data::nifti::{nifti_write, Datatype, Volume};
use crate::data::preprocess::{preprocess, restore_labels};
use crate::error::{Error, Result};
use crate::model::{ensemble_predict, ModelParams};
use crate::tensor::Tensor;

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Per-voxel argmax over the class axis of `[C, z, y, x]` probabilities.
pub(crate) fn seg_labels(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = probs.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("segmentation probabilities of shape {shape:?}")));
    }
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let d = probs.data();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Labels on the source grid, x fastest.
    pub mask: Volume,
    pub motion_class: u8,
    pub cls_probs: Vec<f64>,
}

/// Runs the ensemble on one source volume. The mask keeps the input's dims,
/// spacing and orientation.
pub fn predict_volume(models: &[ModelParams], v: &Volume) -> Result<Prediction> {
    let first = models.first().ok_or_else(|| Error::Config("no checkpoints given".into()))?;
    let target = first.config.input_shape;
    let x = preprocess(v, target)?;
    let (seg, cls) = ensemble_predict(models, &x)?;
    let labels = restore_labels(&seg_labels(&seg)?, target, v.dims)?;
    let cls_probs: Vec<f64> = cls.data().iter().map(|&p| p as f64).collect();
    let mut mask = Volume::new(v.dims, v.spacing, labels.into_iter().map(f32::from).collect(), Datatype::U8)?;
    mask.orientation = v.orientation.clone();
    mask.xyzt_units = v.xyzt_units;
    Ok(Prediction { motion_class: argmax(&cls_probs) as u8 + 1, cls_probs, mask })
}

pub const PREDICTION_HEADER: &str = "image,motion_class,p1,p2,p3";

pub fn prediction_csv(rows: &[(String, Prediction)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PREDICTION_HEADER.split(','))
        .map_err(|e| Error::Format(e.to_string()))?;
    for (name, p) in rows {
        let mut rec = vec![name.clone(), p.motion_class.to_string()];
        rec.extend(p.cls_probs.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii").unwrap_or(&name).to_string()
}

/// Writes `<stem>_seg.nii` for every input and `predictions.csv` listing
/// one row per input, in input order. Returns the written mask paths.
pub fn predict_files(models: &[ModelParams], inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Usage("no input volumes".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(inputs.len());
    let mut written = Vec::with_capacity(inputs.len());
    for path in inputs {
        let p = predict_volume(models, &read_volume(path)?)?;
        let stem = file_stem(path);
        let out = out_dir.join(format!("{stem}_seg.nii"));
        write_file(&out, &nifti_write(&p.mask)?)?;
        written.push(out);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or(stem);
        rows.push((name, p));
    }
    write_file(&out_dir.join("predictions.csv"), prediction_csv(&rows)?.as_bytes())?;
    Ok(written)
}
