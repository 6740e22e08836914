//! Multi-task objective.
//!
//! For a batch, the loss is
//! `λ1 · mean_{non-severe}(CE_seg + Dice) + λ2 · mean_{all}(CE_cls)`.
//! Severe samples (motion class 3) carry no segmentation term; if every
//! sample is severe the segmentation term is absent, not merely zero.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Motion class excluded from the segmentation objective.
pub const SEVERE: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 2.25, lambda2: 1.0, dice_smooth: 1e-5 }
    }
}

impl LossWeights {
    /// Scalar form of the objective from its components.
    pub fn combine(&self, seg_ce: f64, dice: f64, cls_ce: f64) -> f64 {
        self.lambda1 * (seg_ce + dice) + self.lambda2 * cls_ce
    }
}

/// Targets for one sample: motion class in `1..=3` and, unless the sample is
/// severe, a label volume in voxel order.
#[derive(Clone, Copy, Debug)]
pub struct SampleTarget<'a> {
    pub mask: Option<&'a [u8]>,
    pub motion_class: u8,
}

impl SampleTarget<'_> {
    pub fn is_severe(&self) -> bool {
        self.motion_class == SEVERE
    }
}

/// `1 − mean_{c ≥ 1} (2Σpg + ε) / (Σp + Σg + ε)` for probabilities
/// `[C, ...]` and integer labels in voxel order.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, mask: &[u8], eps: f64) -> Result<Tensor<T>> {
    let c = *probs.shape().first().ok_or_else(|| Error::dim("soft dice on a scalar"))?;
    let n = probs.numel() / c.max(1);
    if mask.len() != n {
        return Err(Error::dim(format!("soft dice: {} labels for {n} voxels", mask.len())));
    }
    if c < 2 {
        return Err(Error::dim("soft dice needs a background and at least one foreground class"));
    }
    if let Some(&bad) = mask.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    let mut onehot = vec![T::zero(); c * n];
    let mut g_sum = vec![0usize; c];
    for (i, &l) in mask.iter().enumerate() {
        onehot[l as usize * n + i] = T::one();
        g_sum[l as usize] += 1;
    }
    let p = probs.reshape(&[c, n])?;
    let nn = T::from_usize(n);
    let g = Tensor::new(&[c, n], onehot)?;
    // Per-class sums as n × per-class means.
    let inter = p.mul(&g)?.global_avg_pool()?.scale(nn).slice(0, 1, c)?;
    let p_sum = p.global_avg_pool()?.scale(nn).slice(0, 1, c)?;
    let g_sum = Tensor::new(&[c - 1], g_sum[1..].iter().map(|&v| T::from_usize(v)).collect())?;
    let e = T::from_f64(eps);
    let num = inter.scale(T::from_f64(2.0)).add_scalar(e);
    let den = p_sum.add(&g_sum)?.add_scalar(e);
    Ok(num.div(&den)?.mean().neg().add_scalar(T::one()))
}

/// Loss with its parts. Component values are plain numbers for logging;
/// `seg_term` and `cls_term` are the weighted differentiable pieces.
pub struct LossBreakdown<T: Scalar = f32> {
    pub total: Tensor<T>,
    pub seg_term: Option<Tensor<T>>,
    pub cls_term: Tensor<T>,
    /// Means over the contributing samples (0 when no sample contributes).
    pub seg_ce: f64,
    pub dice: f64,
    pub cls_ce: f64,
    pub seg_samples: usize,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn value(&self) -> f64 {
        self.total.item().as_f64()
    }
}

/// Combined objective over a batch of per-sample outputs. `seg_logits[i]`
/// is `[C, ...]`; `cls_logits[i]` is `[K]`; motion classes `1..=K` map to
/// logit indices `0..K`.
pub fn combined_loss<T: Scalar>(
    seg_logits: &[Tensor<T>],
    cls_logits: &[Tensor<T>],
    targets: &[SampleTarget<'_>],
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let b = targets.len();
    if b == 0 {
        return Err(Error::Usage("combined_loss on an empty batch".into()));
    }
    if seg_logits.len() != b || cls_logits.len() != b {
        return Err(Error::dim(format!(
            "{} targets, {} segmentation and {} classification outputs",
            b,
            seg_logits.len(),
            cls_logits.len()
        )));
    }
    let mut seg_parts = Vec::new();
    let mut cls_parts = Vec::with_capacity(b);
    let (mut ce_sum, mut dice_sum, mut cls_sum) = (0.0, 0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let k = cls_logits[i].numel();
        if t.motion_class == 0 || t.motion_class as usize > k {
            return Err(Error::Data(format!("sample {i}: motion class {} outside 1..={k}", t.motion_class)));
        }
        let ce = cls_logits[i].reshape(&[1, k])?.cross_entropy(&[t.motion_class as usize - 1], 1)?;
        cls_sum += ce.item().as_f64();
        cls_parts.push(ce);
        if t.is_severe() {
            continue;
        }
        let mask = t
            .mask
            .ok_or_else(|| Error::Data(format!("sample {i}: motion class {} needs a mask", t.motion_class)))?;
        let labels: Vec<usize> = mask.iter().map(|&l| l as usize).collect();
        let ce = seg_logits[i].cross_entropy(&labels, 0)?;
        let dice = soft_dice_loss(&seg_logits[i].softmax(0)?, mask, w.dice_smooth)?;
        ce_sum += ce.item().as_f64();
        dice_sum += dice.item().as_f64();
        seg_parts.push(ce.add(&dice)?);
    }
    let n_seg = seg_parts.len();
    let cls_term = Tensor::sum_all(&cls_parts)?.scale(T::from_f64(w.lambda2 / b as f64));
    let seg_term = if n_seg > 0 {
        Some(Tensor::sum_all(&seg_parts)?.scale(T::from_f64(w.lambda1 / n_seg as f64)))
    } else {
        None
    };
    let total = match &seg_term {
        Some(s) => s.add(&cls_term)?,
        None => cls_term.clone(),
    };
    if !total.all_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", total.item())));
    }
    let per = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(LossBreakdown {
        total,
        seg_term,
        cls_term,
        seg_ce: per(ce_sum, n_seg),
        dice: per(dice_sum, n_seg),
        cls_ce: cls_sum / b as f64,
        seg_samples: n_seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn onehot(mask: &[u8], c: usize) -> Tensor<f64> {
        let n = mask.len();
        let mut d = vec![0.0; c * n];
        for (i, &l) in mask.iter().enumerate() {
            d[l as usize * n + i] = 1.0;
        }
        t(&[c, n], &d)
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let mask = [0u8, 1, 2, 3, 1, 2];
        let loss = soft_dice_loss(&onehot(&mask, 4), &mask, 1e-5).unwrap().item();
        assert!(loss.abs() < 1e-5);
        let pred = [0u8, 2, 3, 1, 3, 1];
        let loss = soft_dice_loss(&onehot(&pred, 4), &mask, 1e-5).unwrap().item();
        assert!((loss - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_half_overlap_by_count() {
        // Per class: |A| = |B| = 4, |A ∩ B| = 2.
        let mut gt = Vec::new();
        let mut pr = Vec::new();
        for c in 1..4u8 {
            gt.extend([c, c, c, c, 0, 0]);
            pr.extend([c, c, 0, 0, c, c]);
        }
        let loss = soft_dice_loss(&onehot(&pr, 4), &gt, 0.0).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn combine_arithmetic() {
        let w = LossWeights::default();
        assert!((w.combine(0.2, 0.3, 0.4) - 1.525).abs() < 1e-12);
    }

    fn random_logits(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn all_severe_is_classification_only() {
        let mut r = Rng::new(1);
        let seg: Vec<_> = (0..2).map(|_| random_logits(&[4, 2, 3], &mut r)).collect();
        let cls: Vec<_> = (0..2).map(|_| random_logits(&[3], &mut r)).collect();
        let targets = [SampleTarget { mask: None, motion_class: 3 }; 2];
        let out = combined_loss(&seg, &cls, &targets, &LossWeights::default()).unwrap();
        assert!(out.seg_term.is_none());
        assert_eq!(out.value(), out.cls_term.item());
        out.total.backward().unwrap();
        assert!(seg.iter().all(|s| s.grad().is_none()));
    }

    #[test]
    fn mixed_batch_matches_per_sample_loop() {
        let mut r = Rng::new(2);
        let masks: Vec<Vec<u8>> = (0..3).map(|_| (0..6).map(|_| r.below(4) as u8).collect()).collect();
        let seg: Vec<_> = (0..3).map(|_| random_logits(&[4, 6], &mut r)).collect();
        let cls: Vec<_> = (0..3).map(|_| random_logits(&[3], &mut r)).collect();
        let classes = [1u8, 3, 2];
        let targets: Vec<SampleTarget> = (0..3)
            .map(|i| SampleTarget { mask: (classes[i] != 3).then(|| &masks[i][..]), motion_class: classes[i] })
            .collect();
        let w = LossWeights::default();
        let out = combined_loss(&seg, &cls, &targets, &w).unwrap();
        // Independent per-sample arithmetic on raw buffers.
        let lse = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::MIN, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let mut seg_total = 0.0;
        let mut cls_total = 0.0;
        for i in 0..3 {
            let l = cls[i].data();
            cls_total += lse(l) - l[classes[i] as usize - 1];
            if classes[i] == 3 {
                continue;
            }
            let d = seg[i].data();
            let mut ce = 0.0;
            let mut probs = vec![[0.0; 4]; 6];
            for v in 0..6 {
                let col: Vec<f64> = (0..4).map(|c| d[c * 6 + v]).collect();
                let z = lse(&col);
                ce += z - col[masks[i][v] as usize];
                for c in 0..4 {
                    probs[v][c] = (col[c] - z).exp();
                }
            }
            let mut dice = 0.0;
            for c in 1..4 {
                let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
                for v in 0..6 {
                    let g = (masks[i][v] as usize == c) as u8 as f64;
                    pg += probs[v][c] * g;
                    ps += probs[v][c];
                    gs += g;
                }
                dice += (2.0 * pg + 1e-5) / (ps + gs + 1e-5);
            }
            seg_total += ce / 6.0 + 1.0 - dice / 3.0;
        }
        let expect = 2.25 * seg_total / 2.0 + cls_total / 3.0;
        assert!((out.value() - expect).abs() < 1e-12, "{} vs {expect}", out.value());
        assert_eq!(out.seg_samples, 2);
    }

    #[test]
    fn lambda_linearity() {
        let mut r = Rng::new(3);
        let mask: Vec<u8> = (0..6).map(|_| r.below(4) as u8).collect();
        let seg = [random_logits(&[4, 6], &mut r)];
        let cls = [random_logits(&[3], &mut r)];
        let targets = [SampleTarget { mask: Some(&mask), motion_class: 2 }];
        let w = LossWeights::default();
        let a = combined_loss(&seg, &cls, &targets, &w).unwrap();
        let w2 = LossWeights { lambda2: 2.0 * w.lambda2, ..w };
        let b = combined_loss(&seg, &cls, &targets, &w2).unwrap();
        assert!((b.cls_term.item() - 2.0 * a.cls_term.item()).abs() < 1e-12);
        assert_eq!(a.seg_term.as_ref().unwrap().item(), b.seg_term.as_ref().unwrap().item());
        assert!((a.value() - w.combine(a.seg_ce, a.dice, a.cls_ce)).abs() < 1e-12);
    }

    #[test]
    fn missing_mask_is_data_error() {
        let mut r = Rng::new(4);
        let seg = [random_logits(&[4, 6], &mut r)];
        let cls = [random_logits(&[3], &mut r)];
        let targets = [SampleTarget { mask: None, motion_class: 1 }];
        assert!(matches!(combined_loss(&seg, &cls, &targets, &LossWeights::default()), Err(Error::Data(_))));
    }
}
