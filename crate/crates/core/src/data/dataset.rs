//! Network-ready samples, from disk or generated in memory.
//!
//! On disk a split lives in `<root>/<split>/`: one NIfTI image per sample
//! named `<subject>_<phase>_<breathing>.nii`, a `_gt.nii` label volume for
//! non-severe samples, and `manifest.csv` listing them.

use std::path::{Path, PathBuf};

use super::manifest::{load_manifest, manifest_csv, Breathing, Phase, SampleRecord};
use super::nifti::{nifti_read, nifti_write, Volume};
use super::phantom::generate_phantom;
use super::preprocess::{preprocess, preprocess_mask, preprocessed_spacing};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[1, z, y, x]`, normalized.
    pub image: Tensor<f32>,
    /// Labels on the network grid; absent for severe samples.
    pub mask: Option<Vec<u8>>,
    pub motion_class: u8,
    /// Voxel spacing on the network grid, `[z, y, x]`.
    pub spacing: [f64; 3],
    /// Source dims `[x, y, z]` before preprocessing.
    pub original_dims: [usize; 3],
}

impl Sample {
    pub fn from_volumes(id: String, motion_class: u8, image: &Volume, mask: Option<&Volume>, target: [usize; 3]) -> Result<Sample> {
        let mask = match mask {
            Some(m) => {
                if m.dims != image.dims {
                    return Err(Error::Data(format!("{id}: mask dims {:?} differ from image dims {:?}", m.dims, image.dims)));
                }
                let labels = m.labels();
                if labels.iter().any(|&l| l > 3) || m.data.iter().any(|v| v.fract() != 0.0) {
                    return Err(Error::Data(format!("{id}: mask holds values outside 0..=3")));
                }
                Some(preprocess_mask(&labels, m.dims, target)?)
            }
            None => None,
        };
        Ok(Sample {
            image: preprocess(image, target)?,
            spacing: preprocessed_spacing(image.spacing, image.dims, target),
            original_dims: image.dims,
            mask,
            motion_class,
            id,
        })
    }
}

/// Splits `n` by the given class weights using largest remainders.
pub fn class_counts(n: usize, weights: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || total <= 0.0 {
        return Err(Error::Parameter(format!("class mix {weights:?} must be non-negative with a positive sum")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Motion classes for `n` samples in the given mix, shuffled.
pub fn class_sequence(n: usize, weights: [f64; 3], rng: &mut Rng) -> Result<Vec<u8>> {
    let counts = class_counts(n, weights)?;
    let mut classes: Vec<u8> = (0..3).flat_map(|c| vec![c as u8 + 1; counts[c]]).collect();
    rng.shuffle(&mut classes);
    Ok(classes)
}

fn breathing_for(class: u8, rng: &mut Rng) -> Breathing {
    let pick = rng.below(2);
    match (class, pick) {
        (1, 0) => Breathing::FullBreathHold,
        (1, _) | (2, 0) => Breathing::HalfBreathHold,
        (2, _) | (3, 0) => Breathing::FreeBreathing,
        _ => Breathing::IntensiveBreathing,
    }
}

/// Sample `i` belongs to subject `i / 2` and alternates ED / ES.
fn sample_identity(i: usize, class: u8, base: &Rng) -> (String, Phase, Breathing) {
    let subject = format!("P{:03}", i / 2 + 1);
    let phase = if i % 2 == 0 { Phase::Ed } else { Phase::Es };
    let breathing = breathing_for(class, &mut base.fork(i as u64).fork(3));
    (subject, phase, breathing)
}

/// Phantoms for the given classes, preprocessed onto `target`. Sample `i`
/// uses the stream `Rng::new(seed).fork(i)`.
pub fn synthetic_samples(classes: &[u8], dims: [usize; 3], target: [usize; 3], seed: u64) -> Result<Vec<Sample>> {
    let base = Rng::new(seed);
    classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let (subject, phase, _) = sample_identity(i, class, &base);
            let p = generate_phantom(&base.fork(i as u64), class, phase, dims)?;
            let mask = (class != 3).then_some(&p.mask);
            Sample::from_volumes(format!("{subject}_{phase}"), class, &p.image, mask, target)
        })
        .collect()
}

/// Generates `n` phantoms into `<root>/<split>/` and writes the manifest.
pub fn write_synthetic_split(root: &Path, split: &str, n: usize, weights: [f64; 3], dims: [usize; 3], seed: u64) -> Result<Vec<SampleRecord>> {
    let dir = root.join(split);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let base = Rng::new(seed);
    let classes = class_sequence(n, weights, &mut base.fork(u64::MAX))?;
    let mut records = Vec::with_capacity(n);
    for (i, &class) in classes.iter().enumerate() {
        let (subject, phase, breathing) = sample_identity(i, class, &base);
        let p = generate_phantom(&base.fork(i as u64), class, phase, dims)?;
        let stem = format!("{subject}_{phase}_{breathing}");
        let path = format!("{stem}.nii");
        write_file(&dir.join(&path), &nifti_write(&p.image)?)?;
        let mask_path = if class != 3 {
            let m = format!("{stem}_gt.nii");
            write_file(&dir.join(&m), &nifti_write(&p.mask)?)?;
            Some(m)
        } else {
            None
        };
        records.push(SampleRecord { path, subject, phase, breathing, motion_class: class, mask_path });
    }
    write_file(&dir.join(MANIFEST_FILE), manifest_csv(&records)?.as_bytes())?;
    Ok(records)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    nifti_read(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a manifest and every volume it lists, preprocessed onto `target`.
pub fn load_samples(manifest: &Path, target: [usize; 3]) -> Result<Vec<Sample>> {
    let records = load_manifest(&read_file(manifest)?)?;
    let dir: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    records
        .iter()
        .map(|r| {
            let image = read_volume(&dir.join(&r.path))?;
            let mask = r.mask_path.as_ref().map(|m| read_volume(&dir.join(m))).transpose()?;
            let id = Path::new(&r.path).file_stem().map_or(r.path.clone(), |s| s.to_string_lossy().into_owned());
            Sample::from_volumes(id, r.motion_class, &image, mask.as_ref(), target)
        })
        .collect()
}
