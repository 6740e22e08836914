//! Evaluation metrics: Dice and HD95 for segmentation, accuracy and Cohen's
//! kappa for motion grading.
//!
//! Label volumes are flat `u8` buffers in `[z, y, x]` order with the class
//! map 0 = background, 1 = LV, 2 = MYO, 3 = RV.

use crate::error::{Error, Result};

pub const FOREGROUND: [u8; 3] = [1, 2, 3];
pub const CLASS_NAMES: [&str; 4] = ["background", "LV", "MYO", "RV"];

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1.0 when both are empty.
pub fn dice_coefficient(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice on masks of different size");
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        inter += (ia && ib) as usize;
        p += ia as usize;
        g += ib as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Voxels of `mask` with at least one 6-neighbour outside the mask (the
/// volume border counts as outside).
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Distance from each point of `from` to its nearest point of `to`.
fn nearest_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|i| {
                            let d = (a[i] as f64 - b[i] as f64) * spacing[i];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<(Vec<f64>, Vec<f64>)> {
    let (ba, bb) = (boundary(a, dims), boundary(b, dims));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    Some((nearest_distances(&ba, &bb, spacing), nearest_distances(&bb, &ba, spacing)))
}

/// Symmetric 95th-percentile boundary distance: the larger of the two
/// directed 95th percentiles. `None` when either mask is empty.
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let (mut ab, mut ba) = directed(pred, gt, dims, spacing)?;
    Some(percentile(&mut ab, 95.0).max(percentile(&mut ba, 95.0)))
}

/// Classic Hausdorff distance between the two boundaries.
pub fn hausdorff(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let (ab, ba) = directed(pred, gt, dims, spacing)?;
    Some(ab.iter().chain(&ba).cloned().fold(0.0, f64::max))
}

fn check_labels(preds: &[u8], labels: &[u8]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_labels(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1 (a single class on both sides), so the value
    /// is set to 0 by convention.
    pub degenerate: bool,
}

/// Cohen's kappa `(p_o − p_e) / (1 − p_e)` with `p_e` from the marginals.
pub fn cohens_kappa(preds: &[u8], labels: &[u8]) -> Result<Kappa> {
    check_labels(preds, labels)?;
    let n = preds.len() as f64;
    let mut pm = [0usize; 256];
    let mut lm = [0usize; 256];
    let mut agree = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        pm[p as usize] += 1;
        lm[l as usize] += 1;
        agree += (p == l) as usize;
    }
    let po = agree as f64 / n;
    let pe: f64 = pm.iter().zip(&lm).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (n * n);
    if pe >= 1.0 {
        return Ok(Kappa { value: 0.0, degenerate: true });
    }
    Ok(Kappa { value: (po - pe) / (1.0 - pe), degenerate: false })
}

/// Per-class scores for one segmented volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    pub dice: [f64; 3],
    pub hd95: [Option<f64>; 3],
}

impl SegScores {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    /// Mean over classes where the distance is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        let v: Vec<f64> = self.hd95.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn score_segmentation(pred: &[u8], gt: &[u8], dims: [usize; 3], spacing: [f64; 3]) -> SegScores {
    let mut dice = [0.0; 3];
    let mut hd = [None; 3];
    for (i, &c) in FOREGROUND.iter().enumerate() {
        dice[i] = dice_coefficient(pred, gt, c);
        let pm: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let gm: Vec<bool> = gt.iter().map(|&v| v == c).collect();
        hd[i] = hd95(&pm, &gm, dims, spacing);
    }
    SegScores { dice, hd95: hd }
}
