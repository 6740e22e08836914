//! Training, cross-validation, evaluation and prediction.

mod config;
mod optim;
pub mod predict;

pub use config::TrainConfig;
pub use optim::{adamw_step, cosine_lr, AdamW, OptimState};
pub use predict::{argmax, predict_files, predict_volume, prediction_csv, Prediction};

use std::path::Path;

use crate::data::augment::{augment, AugmentConfig};
use crate::data::dataset::{write_file, Sample};
use crate::data::folds::{stratified_kfold, FoldSplit};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, SampleTarget};
use crate::metrics::{accuracy, cohens_kappa, score_segmentation, SegScores};
use crate::model::{build_model, ensemble_predict, forward, save_checkpoint, ModelParams, Mode};
use crate::report::{fold_report, FoldMetrics, FoldReport};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub fold: Option<usize>,
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's batches.
    pub loss: f64,
    pub seg_ce: f64,
    pub dice: f64,
    pub cls_ce: f64,
    pub eval: Option<FoldMetrics>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let fold = self.fold.map_or(String::new(), |f| format!("fold {} ", f + 1));
        let mut s = format!(
            "{fold}epoch {:>3} lr {:.3e} loss {:.4} (seg ce {:.4}, dice {:.4}, cls ce {:.4})",
            self.epoch + 1,
            self.lr,
            self.loss,
            self.seg_ce,
            self.dice,
            self.cls_ce
        );
        if let Some(m) = &self.eval {
            s.push_str(&format!(" | held-out acc {:.3} kappa {:.3}", m.accuracy, m.kappa));
            if let Some(d) = m.dice {
                s.push_str(&format!(" dice {d:.3}"));
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SamplePrediction {
    pub id: String,
    pub label: u8,
    pub predicted: u8,
    pub cls_probs: Vec<f64>,
    /// Only for samples with a reference mask.
    pub seg: Option<SegScores>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<SamplePrediction>,
    pub metrics: FoldMetrics,
    /// Kappa was undefined (one class on both sides) and reported as 0.
    pub kappa_degenerate: bool,
}

/// Scores an ensemble on labelled samples. Dice is class-averaged per
/// sample, HD95 averaged over the classes where it is defined; both are
/// then averaged over the samples that have masks.
pub fn evaluate(models: &[ModelParams], samples: &[&Sample]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let (seg, cls) = ensemble_predict(models, &s.image)?;
        let cls_probs: Vec<f64> = cls.data().iter().map(|&v| v as f64).collect();
        let predicted = argmax(&cls_probs) as u8 + 1;
        let seg = match &s.mask {
            Some(mask) => {
                let labels = predict::seg_labels(&seg)?;
                let [_, z, y, x] = <[usize; 4]>::try_from(seg.shape()).map_err(|_| Error::dim("segmentation rank"))?;
                Some(score_segmentation(&labels, mask, [z, y, x], s.spacing))
            }
            None => None,
        };
        predictions.push(SamplePrediction { id: s.id.clone(), label: s.motion_class, predicted, cls_probs, seg });
    }
    let preds: Vec<u8> = predictions.iter().map(|p| p.predicted).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let kappa = cohens_kappa(&preds, &labels)?;
    let dices: Vec<f64> = predictions.iter().filter_map(|p| p.seg.as_ref()).map(SegScores::mean_dice).collect();
    let hds: Vec<f64> = predictions.iter().filter_map(|p| p.seg.as_ref()?.mean_hd95()).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Evaluation {
        metrics: FoldMetrics {
            accuracy: accuracy(&preds, &labels)?,
            kappa: kappa.value,
            dice: mean(&dices),
            hd95: mean(&hds),
        },
        kappa_degenerate: kappa.degenerate,
        predictions,
    })
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochLog>,
    /// Held-out evaluation after the last epoch (when an eval set is given).
    pub final_eval: Option<Evaluation>,
}

fn check_samples(cfg: &TrainConfig, samples: &[&Sample]) -> Result<()> {
    let [z, y, x] = cfg.model.tensor_dims();
    let want = [cfg.model.in_channels, z, y, x];
    for s in samples {
        if s.image.shape() != want {
            return Err(Error::Data(format!(
                "sample {} has shape {:?}, the model expects {want:?}",
                s.id,
                s.image.shape()
            )));
        }
    }
    Ok(())
}

/// Trains one model from scratch. All randomness (initialization, sample
/// order, augmentation, dropout) derives from `seed`.
pub fn train_model(
    cfg: &TrainConfig,
    train: &[&Sample],
    eval: &[&Sample],
    seed: u64,
    fold: Option<usize>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    check_samples(cfg, train)?;
    check_samples(cfg, eval)?;
    let base = Rng::new(seed);
    let mut params: ModelParams = build_model(&cfg.model, &mut base.fork(0))?;
    let mut state = OptimState::new(AdamW { weight_decay: cfg.weight_decay, ..Default::default() });
    let weights = cfg.loss_weights();
    let aug = AugmentConfig::default();
    let dims = cfg.model.tensor_dims();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.lr_min);
        let mut rng = base.fork(1 + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let (mut sums, mut batches) = ([0.0f64; 4], 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut seg = Vec::with_capacity(chunk.len());
            let mut cls = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train[i];
                let (img, mask) = if cfg.augment {
                    augment(s.image.data(), s.mask.as_deref(), dims, &mut rng, &aug)
                } else {
                    (s.image.to_vec(), s.mask.clone())
                };
                let x = Tensor::new(s.image.shape(), img)?;
                let out = forward(&params, &x, Mode::Train(&mut rng))?;
                seg.push(out.seg_logits);
                cls.push(out.cls_logits);
                masks.push(mask);
            }
            let targets: Vec<SampleTarget> = chunk
                .iter()
                .zip(&masks)
                .map(|(&i, m)| SampleTarget { mask: m.as_deref(), motion_class: train[i].motion_class })
                .collect();
            let lb = combined_loss(&seg, &cls, &targets, &weights)?;
            let v = lb.value();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("epoch {} step {}: loss is {v}", epoch + 1, step + 1)));
            }
            lb.total.backward()?;
            adamw_step(&mut params, &mut state, lr)?;
            if !params.all_finite() {
                return Err(Error::Numeric(format!("epoch {} step {}: non-finite parameters", epoch + 1, step + 1)));
            }
            for (acc, x) in sums.iter_mut().zip([v, lb.seg_ce, lb.dice, lb.cls_ce]) {
                *acc += x;
            }
            batches += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let evaluation = if !eval.is_empty() && (last || due) {
            Some(evaluate(std::slice::from_ref(&params), eval)?)
        } else {
            None
        };
        let n = batches as f64;
        let entry = EpochLog {
            fold,
            epoch,
            lr,
            loss: sums[0] / n,
            seg_ce: sums[1] / n,
            dice: sums[2] / n,
            cls_ce: sums[3] / n,
            eval: evaluation.as_ref().map(|e| e.metrics),
        };
        log(&entry);
        history.push(entry);
        if last {
            final_eval = evaluation;
        }
    }
    Ok(TrainOutcome { params, history, final_eval })
}

/// Motion classes of the samples, as stratification labels.
pub fn split_samples(samples: &[Sample], k: usize, seed: u64) -> Result<FoldSplit> {
    let labels: Vec<u8> = samples.iter().map(|s| s.motion_class).collect();
    stratified_kfold(&labels, k, &mut Rng::new(mix_seed(seed, u64::MAX)))
}

/// Trains on every fold but `fold` and scores the final weights on `fold`.
pub fn train_fold(
    cfg: &TrainConfig,
    samples: &[Sample],
    split: &FoldSplit,
    fold: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainOutcome, FoldMetrics)> {
    if fold >= split.k() {
        return Err(Error::Usage(format!("fold {} of {}", fold + 1, split.k())));
    }
    if split.test_indices(fold).is_empty() {
        return Err(Error::Data(format!("fold {} is empty", fold + 1)));
    }
    let train: Vec<&Sample> = split.train_indices(fold).into_iter().map(|i| &samples[i]).collect();
    let test: Vec<&Sample> = split.test_indices(fold).iter().map(|&i| &samples[i]).collect();
    let outcome = train_model(cfg, &train, &test, mix_seed(cfg.seed, fold as u64), Some(fold), log)?;
    let metrics = outcome.final_eval.as_ref().expect("held-out set is non-empty").metrics;
    Ok((outcome, metrics))
}

pub struct CvOutcome {
    pub split: FoldSplit,
    pub models: Vec<ModelParams>,
    pub fold_metrics: Vec<FoldMetrics>,
    /// Ensemble of all fold models on the validation set.
    pub validation: Option<Evaluation>,
    pub report: FoldReport,
}

/// k-fold cross-validation. With an output directory, writes
/// `fold<i>.ckpt` per fold plus `report.txt` and `report.csv`.
pub fn run_cv(cfg: &TrainConfig, samples: &[Sample], validation: Option<&[Sample]>, log: &mut dyn FnMut(&EpochLog)) -> Result<CvOutcome> {
    cfg.validate()?;
    let split = split_samples(samples, cfg.folds, cfg.seed)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut models = Vec::with_capacity(cfg.folds);
    let mut fold_metrics = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (outcome, metrics) = train_fold(cfg, samples, &split, fold, log)?;
        if let Some(dir) = &cfg.output_dir {
            save_checkpoint(&outcome.params, &checkpoint_path(dir, fold))?;
        }
        models.push(outcome.params);
        fold_metrics.push(metrics);
    }
    let validation = match validation {
        Some(v) if !v.is_empty() => {
            let refs: Vec<&Sample> = v.iter().collect();
            Some(evaluate(&models, &refs)?)
        }
        _ => None,
    };
    let report = fold_report(&fold_metrics, validation.as_ref().map(|v| &v.metrics));
    if let Some(dir) = &cfg.output_dir {
        write_file(&dir.join("report.txt"), report.to_text().as_bytes())?;
        write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    }
    Ok(CvOutcome { split, models, fold_metrics, validation, report })
}

pub fn checkpoint_path(dir: &Path, fold: usize) -> std::path::PathBuf {
    dir.join(format!("fold{}.ckpt", fold + 1))
}
