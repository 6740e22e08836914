//! Training configuration: flat `key = value` text covering both the
//! training schedule and the model shape.
//!
//! A `profile` line (desk or paper) selects the defaults for everything
//! else, wherever it appears in the file; the remaining keys then override
//! them. Unknown keys are errors.

use std::path::PathBuf;

use crate::config::{self, parse_kv};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{ModelConfig, Profile};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub folds: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub augment: bool,
    /// Evaluate the held-out split every this many epochs (0: only after
    /// the last epoch).
    pub eval_every: usize,
    pub output_dir: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        TrainConfig {
            profile,
            model: ModelConfig::for_profile(profile),
            epochs: match profile {
                Profile::Desk => 30,
                Profile::Paper => 250,
            },
            base_lr: 2e-4,
            lr_min: 0.0,
            batch_size: 2,
            weight_decay: 1e-2,
            folds: 5,
            seed: 0,
            lambda1: 2.25,
            lambda2: 1.0,
            augment: true,
            eval_every: 1,
            output_dir: None,
            train_manifest: None,
            val_manifest: None,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=self.base_lr).contains(&self.lr_min) {
            return bad(format!("lr_min must lie in [0, base_lr], got {}", self.lr_min));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad("weight_decay, lambda1 and lambda2 must be non-negative".into());
        }
        self.model.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let profile = match entries.iter().find(|e| e.key == "profile") {
            Some(e) => e.value.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for e in &entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "profile" => {}
                "epochs" => cfg.epochs = config::value(k, v)?,
                "base_lr" => cfg.base_lr = config::value(k, v)?,
                "lr_min" => cfg.lr_min = config::value(k, v)?,
                "batch_size" => cfg.batch_size = config::value(k, v)?,
                "weight_decay" => cfg.weight_decay = config::value(k, v)?,
                "folds" => cfg.folds = config::value(k, v)?,
                "seed" => cfg.seed = config::value(k, v)?,
                "lambda1" => cfg.lambda1 = config::value(k, v)?,
                "lambda2" => cfg.lambda2 = config::value(k, v)?,
                "augment" => cfg.augment = config::value(k, v)?,
                "eval_every" => cfg.eval_every = config::value(k, v)?,
                "output_dir" => cfg.output_dir = Some(v.into()),
                "train_manifest" => cfg.train_manifest = Some(v.into()),
                "val_manifest" => cfg.val_manifest = Some(v.into()),
                _ => {
                    if !cfg.model.apply(e)? {
                        return Err(Error::Config(format!("line {}: unknown key {k}", e.line)));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "profile = {}\nepochs = {}\nbase_lr = {}\nlr_min = {}\nbatch_size = {}\nweight_decay = {}\n\
             folds = {}\nseed = {}\nlambda1 = {}\nlambda2 = {}\naugment = {}\neval_every = {}\n",
            self.profile,
            self.epochs,
            self.base_lr,
            self.lr_min,
            self.batch_size,
            self.weight_decay,
            self.folds,
            self.seed,
            self.lambda1,
            self.lambda2,
            self.augment,
            self.eval_every,
        );
        for (k, v) in [("output_dir", &self.output_dir), ("train_manifest", &self.train_manifest), ("val_manifest", &self.val_manifest)] {
            if let Some(p) = v {
                s.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        s + &self.model.to_text()
    }
}
