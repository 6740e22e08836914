//! AdamW with decoupled weight decay, and the cosine learning-rate
//! schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::Module;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Per-parameter moment buffers, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub hp: AdamW,
    moments: HashMap<String, Moments>,
}

impl OptimState {
    pub fn new(hp: AdamW) -> Self {
        OptimState { hp, moments: HashMap::new() }
    }

    /// Updates taken by parameter `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.step)
    }
}

/// One AdamW update from the gradients stored on the parameters.
///
/// Parameters without a gradient are left untouched, moments included.
/// Each updated parameter is replaced by a fresh leaf, which also clears
/// its gradient.
pub fn adamw_step<T: Scalar, M: Module<T>>(params: &mut M, state: &mut OptimState, lr: f64) -> Result<()> {
    let hp = state.hp;
    let mut err = None;
    params.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(g) = t.grad() else { return };
        let n = t.numel();
        let mo = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], step: 0 });
        if mo.m.len() != n || g.len() != n {
            err = Some(Error::dim(format!(
                "optimizer state for {name} has {} entries, parameter has {n}",
                mo.m.len()
            )));
            return;
        }
        mo.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(mo.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(mo.step as i32);
        let decay = 1.0 - lr * hp.weight_decay;
        let data: Vec<T> = t
            .data()
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (&p, &g))| {
                let g = g.as_f64();
                let p = p.as_f64() * decay;
                mo.m[i] = hp.beta1 * mo.m[i] + (1.0 - hp.beta1) * g;
                mo.v[i] = hp.beta2 * mo.v[i] + (1.0 - hp.beta2) * g * g;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                T::from_f64(p - lr * mhat / (vhat.sqrt() + hp.eps))
            })
            .collect();
        *t = t.with_data(data).expect("same length");
    });
    err.map_or(Ok(()), Err)
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`, clamped to `t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
