//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every check runs in `f64`. A check perturbs (a sample of) the
//! coordinates of every tensor of a [`Module`], compares the central
//! difference `(f(θ + h) − f(θ − h)) / 2h` with the backward pass, and
//! reports the
//! norm-based relative error `‖g_num − g_ad‖ / max(‖g_num‖, ‖g_ad‖)` per
//! tensor. Non-scalar outputs are reduced with fixed random weights so
//! every output element contributes.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::loss::{combined_loss, soft_dice_loss, LossWeights, SampleTarget};
use crate::model::{build_model, forward, residual_block, up_block, ModelConfig, Mode, ResBlockParams, UpBlockParams};
use crate::params::{LayerNormParams, LinearParams, Module};
use crate::rng::Rng;
use crate::swin::{
    build_shift_mask, cyclic_shift, patch_embed, patch_merging, swin_block, window_mhsa, window_partition,
    window_reverse, AttentionParams, PatchMergingParams, SwinPair,
};
use crate::tensor::{no_grad, Tensor};

/// Central differences are taken at each step. Large steps suffer from
/// curvature (a 1×1 convolution followed by instance norm is nearly scale
/// invariant, so its loss curve bends on the scale of its weight), small
/// steps from round-off; the estimate kept is the one where consecutive
/// steps agree best.
pub const FD_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Both gradient norms below this count as agreement (pure round-off).
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative error over the checked tensors.
    pub rel_error: f64,
    /// Tensor holding the worst error.
    pub worst: String,
    pub coords: usize,
    pub seconds: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOLERANCE
    }
}

/// Plain tensors under check, as a [`Module`].
pub struct Inputs(pub Vec<Tensor<f64>>);

impl Module<f64> for Inputs {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        self.0.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        self.0.visit_mut(prefix, f)
    }
}

/// A module plus one input tensor, both checked.
pub struct WithInput<M> {
    pub module: M,
    pub input: Tensor<f64>,
}

impl<M: Module<f64>> Module<f64> for WithInput<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        f("input", &self.input);
        self.module.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        f("input", &mut self.input);
        self.module.visit_mut(prefix, f)
    }
}

fn reduce(out: Tensor<f64>, weights: &mut Option<Tensor<f64>>) -> Result<Tensor<f64>> {
    if out.numel() == 1 {
        return out.reshape(&[]);
    }
    let w = weights.get_or_insert_with(|| {
        let mut r = Rng::new(0x5eed);
        Tensor::new(out.shape(), (0..out.numel()).map(|_| r.normal()).collect()).expect("shape")
    });
    if w.shape() != out.shape() {
        return Err(Error::dim(format!("output shape changed to {:?}", out.shape())));
    }
    Ok(out.mul(w)?.sum())
}

/// Checks `f` against central differences for every tensor of `m`. At most
/// `max_coords` coordinates per tensor are probed (all of them when `None`).
pub fn check_module<M: Module<f64>>(
    name: &str,
    m: &mut M,
    f: impl Fn(&M) -> Result<Tensor<f64>>,
    max_coords: Option<usize>,
) -> Result<GradCheck> {
    let start = Instant::now();
    // Every tensor becomes a fresh leaf that requires grad.
    m.visit_mut("", &mut |_, t| {
        *t = Tensor::param(t.shape(), t.to_vec()).expect("same shape");
    });
    let mut weights = None;
    let loss = reduce(f(m)?, &mut weights)?;
    loss.backward()?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    m.visit("", &mut |n, t| analytic.push((n.to_string(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))));

    let _guard = no_grad();
    let mut rng = Rng::new(0xfd);
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for (tname, grad) in &analytic {
        let n = grad.len();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(k) = max_coords.filter(|&k| k < n) {
            rng.shuffle(&mut idx);
            idx.truncate(k);
        }
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut original = None;
                m.visit_mut("", &mut |n2, t| {
                    if n2 == tname.as_str() {
                        let mut d = t.to_vec();
                        original = Some(t.clone());
                        d[i] += delta;
                        *t = t.with_data(d).expect("same shape");
                    }
                });
                let v = reduce(f(m)?, &mut weights)?.item();
                let orig = original.expect("tensor present");
                m.visit_mut("", &mut |n2, t| {
                    if n2 == tname.as_str() {
                        *t = orig.clone();
                    }
                });
                Ok(v)
            };
            let mut est = Vec::with_capacity(FD_STEPS.len());
            for &h in &FD_STEPS {
                est.push((eval(h)? - eval(-h)?) / (2.0 * h));
            }
            let num = stable_estimate(&est);
            diff += (num - grad[i]).powi(2);
            na += grad[i] * grad[i];
            nn += num * num;
            coords += 1;
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        let rel = if na.max(nn) < ABS_FLOOR { 0.0 } else { diff / na.max(nn) };
        if rel >= worst.0 || worst.1.is_empty() {
            worst = (rel, tname.clone());
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_error: worst.0,
        worst: worst.1,
        coords,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Smaller-step member of the consecutive pair with the least spread.
fn stable_estimate(est: &[f64]) -> f64 {
    (1..est.len())
        .min_by(|&a, &b| (est[a] - est[a - 1]).abs().total_cmp(&(est[b] - est[b - 1]).abs()))
        .map_or(est[0], |i| est[i])
}

fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).expect("shape")
}

fn positive(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.uniform_range(0.5, 2.0)).collect()).expect("shape")
}

/// Re-draws every weight with std `s` so checks are not dominated by the
/// tiny initial scale.
fn scramble<M: Module<f64>>(m: &mut M, s: f64, r: &mut Rng) {
    m.visit_mut("", &mut |_, t| {
        let v = t.data().iter().map(|_| r.normal() * s).collect();
        *t = t.with_data(v).expect("shape");
    });
}

type Case = (&'static str, Box<dyn Fn() -> Result<GradCheck>>);

fn op_case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static) -> Case {
    let inputs = std::cell::RefCell::new(Some(inputs));
    (
        name,
        Box::new(move || {
            let mut m = Inputs(inputs.borrow_mut().take().unwrap_or_default());
            let res = check_module(name, &mut m, |m| f(&m.0), None);
            *inputs.borrow_mut() = Some(m.0);
            res
        }),
    )
}

/// Every differentiable primitive and layer, each on small random data.
pub fn primitive_cases() -> Vec<Case> {
    let mut r = Rng::new(11);
    let r = &mut r;
    let mut cases: Vec<Case> = vec![
        op_case("add", vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |x| x[0].add(&x[1])),
        op_case("sub", vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |x| x[0].sub(&x[1])),
        op_case("mul", vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |x| x[0].mul(&x[1])),
        op_case("div", vec![rand_t(&[3, 4], r), positive(&[3, 4], r)], |x| x[0].div(&x[1])),
        op_case("scale", vec![rand_t(&[5], r)], |x| Ok(x[0].scale(-1.7))),
        op_case("add_scalar", vec![rand_t(&[5], r)], |x| Ok(x[0].add_scalar(0.3))),
        op_case("neg", vec![rand_t(&[5], r)], |x| Ok(x[0].neg())),
        op_case("exp", vec![rand_t(&[5], r)], |x| Ok(x[0].exp())),
        op_case("ln", vec![positive(&[5], r)], |x| Ok(x[0].ln())),
        op_case("sum", vec![rand_t(&[2, 3], r)], |x| Ok(x[0].sum().scale(1.3))),
        op_case("mean", vec![rand_t(&[2, 3], r)], |x| Ok(x[0].mean().exp())),
        op_case("sum_all", vec![rand_t(&[4], r), rand_t(&[4], r)], |x| Tensor::sum_all(x)),
        op_case("reshape", vec![rand_t(&[2, 6], r)], |x| x[0].reshape(&[3, 4])),
        op_case("permute", vec![rand_t(&[2, 3, 4], r)], |x| x[0].permute(&[2, 0, 1])),
        op_case("transpose_last", vec![rand_t(&[2, 3, 4], r)], |x| x[0].transpose_last()),
        op_case("concat", vec![rand_t(&[2, 3], r), rand_t(&[1, 3], r)], |x| Tensor::concat(x, 0)),
        op_case("slice", vec![rand_t(&[4, 3], r)], |x| x[0].slice(0, 1, 3)),
        op_case("crop", vec![rand_t(&[3, 4, 5], r)], |x| x[0].crop(&[1, 0, 2], &[2, 3, 2])),
        op_case("pad_constant", vec![rand_t(&[2, 3], r)], |x| x[0].pad_constant(&[(1, 0), (0, 2)], 0.5)),
        op_case("gather_rows", vec![rand_t(&[3, 2], r)], |x| {
            x[0].gather_rows(Arc::new(vec![Some(2), None, Some(0), Some(2)]), &[2, 2])
        }),
        op_case("matmul", vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)], |x| x[0].matmul(&x[1])),
        op_case("matmul_batched", vec![rand_t(&[2, 3, 4], r), rand_t(&[2, 4, 2], r)], |x| x[0].matmul(&x[1])),
        op_case("linear", vec![rand_t(&[2, 3, 4], r), rand_t(&[4, 5], r), rand_t(&[5], r)], |x| {
            x[0].linear(&x[1], Some(&x[2]))
        }),
        op_case("conv3d", vec![rand_t(&[2, 4, 3, 5], r), rand_t(&[3, 2, 3, 3, 3], r), rand_t(&[3], r)], |x| {
            x[0].conv3d(&x[1], Some(&x[2]), 1, 1)
        }),
        op_case("conv3d_strided", vec![rand_t(&[2, 4, 4, 4], r), rand_t(&[2, 2, 2, 2, 2], r)], |x| {
            x[0].conv3d(&x[1], None, 2, 0)
        }),
        op_case("conv_transpose3d", vec![rand_t(&[3, 2, 2, 3], r), rand_t(&[3, 2, 2, 2, 2], r), rand_t(&[2], r)], |x| {
            x[0].conv_transpose3d(&x[1], Some(&x[2]), 2)
        }),
        op_case("softmax", vec![rand_t(&[3, 4], r)], |x| x[0].softmax(1)),
        op_case("softmax_axis0", vec![rand_t(&[3, 4], r)], |x| x[0].softmax(0)),
        op_case("layer_norm", vec![rand_t(&[3, 6], r), rand_t(&[6], r), rand_t(&[6], r)], |x| {
            x[0].layer_norm(Some(&x[1]), Some(&x[2]), 1e-5)
        }),
        op_case("instance_norm", vec![rand_t(&[2, 3, 2, 2], r)], |x| x[0].instance_norm(1e-5)),
        op_case("gelu", vec![rand_t(&[8], r)], |x| Ok(x[0].gelu())),
        op_case("leaky_relu", vec![rand_t(&[8], r)], |x| Ok(x[0].leaky_relu(0.01))),
        op_case("global_avg_pool", vec![rand_t(&[3, 2, 2], r)], |x| x[0].global_avg_pool()),
        op_case("dropout", vec![rand_t(&[10], r)], |x| x[0].dropout(0.3, &mut Rng::new(5), true)),
        op_case("cross_entropy", vec![rand_t(&[4, 3], r)], |x| x[0].cross_entropy(&[0, 2, 1, 2], 1)),
        op_case("cross_entropy_axis0", vec![rand_t(&[4, 6], r)], |x| x[0].cross_entropy(&[0, 3, 1, 2, 2, 0], 0)),
        op_case("soft_dice", vec![rand_t(&[4, 2, 3], r)], |x| {
            soft_dice_loss(&x[0].softmax(0)?, &[0, 1, 2, 3, 1, 1], 1e-5)
        }),
        op_case("combined_loss", vec![rand_t(&[4, 2, 2], r), rand_t(&[3], r), rand_t(&[4, 2, 2], r), rand_t(&[3], r)], |x| {
            let mask = [0u8, 1, 2, 3];
            let targets = [
                SampleTarget { mask: Some(&mask), motion_class: 2 },
                SampleTarget { mask: None, motion_class: 3 },
            ];
            let seg = [x[0].clone(), x[2].clone()];
            let cls = [x[1].clone(), x[3].clone()];
            Ok(combined_loss(&seg, &cls, &targets, &LossWeights::default())?.total)
        }),
        op_case("cyclic_shift", vec![rand_t(&[3, 2, 4, 2], r)], |x| cyclic_shift(&x[0], [1, -1, 2])),
        op_case("window_partition_reverse", vec![rand_t(&[4, 2, 4, 3], r)], |x| {
            let w = window_partition(&x[0], 2)?;
            window_reverse(&w.scale(2.0), 2, [4, 2, 4])
        }),
    ];

    let mut rs = Rng::new(12);
    let mut attn: AttentionParams<f64> = AttentionParams {
        qkv: LinearParams::init(6, 18, true, &mut rs),
        proj: LinearParams::init(6, 6, true, &mut rs),
    };
    scramble(&mut attn, 0.5, &mut rs);
    let m = WithInput { module: attn, input: rand_t(&[8, 8, 6], &mut rs) };
    cases.push(module_case("window_mhsa_masked", m, |m| {
        let mask = build_shift_mask([4, 4, 4], 2, 1)?;
        Ok(window_mhsa(&m.input, &m.module, 2, Some(&mask))?.0)
    }));

    let mut pair: SwinPair<f64> = SwinPair::init(6, 2, &mut rs).expect("heads divide");
    scramble(&mut pair, 0.3, &mut rs);
    cases.push(module_case("swin_block", WithInput { module: pair, input: rand_t(&[3, 4, 4, 6], &mut rs) }, |m| {
        swin_block(&m.input, &m.module, 2)
    }));

    let mut embed: LinearParams<f64> = LinearParams::init(16, 4, true, &mut rs);
    scramble(&mut embed, 0.3, &mut rs);
    cases.push(module_case("patch_embed", WithInput { module: embed, input: rand_t(&[2, 2, 4, 4], &mut rs) }, |m| {
        patch_embed(&m.input, &m.module, 2)
    }));

    let mut merge: PatchMergingParams<f64> = PatchMergingParams::init(3, &mut rs);
    scramble(&mut merge, 0.3, &mut rs);
    cases.push(module_case("patch_merging", WithInput { module: merge, input: rand_t(&[3, 2, 4, 3], &mut rs) }, |m| {
        patch_merging(&m.input, &m.module)
    }));

    let mut ln: LayerNormParams<f64> = LayerNormParams::new(5);
    scramble(&mut ln, 1.0, &mut rs);
    cases.push(module_case("layer_norm_params", WithInput { module: ln, input: rand_t(&[2, 5], &mut rs) }, |m| {
        m.module.forward(&m.input)
    }));

    let res: ResBlockParams<f64> = ResBlockParams::init(2, 3, &mut rs);
    cases.push(module_case("residual_block", WithInput { module: res, input: rand_t(&[2, 3, 3, 3], &mut rs) }, |m| {
        residual_block(&m.input, &m.module)
    }));

    let up: UpBlockParams<f64> = UpBlockParams::init(4, 2, &mut rs);
    let skip = rand_t(&[2, 3, 4, 3], &mut rs);
    cases.push(module_case("up_block", WithInput { module: up, input: rand_t(&[4, 2, 2, 2], &mut rs) }, move |m| {
        up_block(&m.input, &skip, &m.module)
    }));
    cases
}

fn module_case<M: Module<f64> + 'static>(name: &'static str, m: M, f: impl Fn(&M) -> Result<Tensor<f64>> + 'static) -> Case {
    let m = std::cell::RefCell::new(m);
    (name, Box::new(move || check_module(name, &mut *m.borrow_mut(), &f, None)))
}

/// Desk-width model on a `16×16×8` volume (`x × y × z`).
pub fn model_config() -> ModelConfig {
    ModelConfig { input_shape: [16, 16, 8], ..ModelConfig::desk() }
}

/// Whole network through the combined loss. Probes `coords_per_tensor`
/// coordinates of each parameter tensor.
pub fn check_model(coords_per_tensor: usize) -> Result<GradCheck> {
    let cfg = model_config();
    let mut r = Rng::new(21);
    let params = build_model::<f64>(&cfg, &mut r)?;
    let [z, y, x] = cfg.tensor_dims();
    let volume = rand_t(&[1, z, y, x], &mut r);
    let mask: Vec<u8> = (0..z * y * x).map(|_| r.below(4) as u8).collect();
    let mut m = WithInput { module: params, input: volume };
    check_module(
        "model (desk widths, 16x16x8)",
        &mut m,
        |m| {
            let out = forward(&m.module, &m.input, Mode::Eval)?;
            let t = [SampleTarget { mask: Some(&mask), motion_class: 2 }];
            Ok(combined_loss(&[out.seg_logits], &[out.cls_logits], &t, &LossWeights::default())?.total)
        },
        Some(coords_per_tensor),
    )
}

/// Runs every primitive case and the model check.
pub fn run_suite(model_coords: usize) -> Result<Vec<GradCheck>> {
    let mut out: Vec<GradCheck> = primitive_cases().into_iter().map(|(_, c)| c()).collect::<Result<_>>()?;
    out.push(check_model(model_coords)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // exp with the derivative of x² / 2 plugged in.
        let bad = |x: &[Tensor<f64>]| Ok(x[0].unary("bad", |v| v.exp(), |v, _| v));
        let mut m = Inputs(vec![Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap()]);
        let c = check_module("bad", &mut m, |m| bad(&m.0), None).unwrap();
        assert!(!c.passed(), "{c:?}");
    }

    #[test]
    fn primitives_pass() {
        for (name, case) in primitive_cases() {
            let c = case().unwrap();
            assert!(c.passed(), "{name}: {c:?}");
        }
    }
}
