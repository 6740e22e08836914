//! Parameter containers shared by the transformer and the decoder.
//!
//! Every learnable structure implements [`Module`], which walks its tensors
//! with dotted names (`stages.0.blocks.1.attn.qkv.weight`). The optimizer,
//! checkpoint writer and gradient checker all work through that walk.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit("", &mut |_, t| t.zero_grad());
    }

    /// Overwrites every parameter from `source` by name (with casting).
    /// Names and shapes must match one-to-one.
    fn load_named<U: Scalar>(&mut self, source: &[(String, Tensor<U>)]) -> Result<()>
    where
        Self: Sized,
    {
        let map: HashMap<&str, &Tensor<U>> = source.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut seen = 0;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match map.get(name) {
                Some(src) if src.shape() == t.shape() => {
                    let data = src.data().iter().map(|v| T::from_f64(v.as_f64())).collect();
                    *t = t.with_data(data).expect("shape checked");
                    seen += 1;
                }
                Some(src) => {
                    err = Some(Error::Data(format!(
                        "parameter {name}: stored shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Data(format!("parameter {name} missing"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != map.len() {
            return Err(Error::Data(format!(
                "{} stored tensors but the model has {seen}",
                map.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Module`] for a struct generic over `T` by visiting the
/// listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::params::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>)) {
                $( $crate::params::Module::visit(&self.$field, &$crate::params::join_name(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>)) {
                $( $crate::params::Module::visit_mut(&mut self.$field, &$crate::params::join_name(prefix, stringify!($field)), f); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

fn param<T: Scalar>(shape: &[usize], values: impl Iterator<Item = f64>) -> Tensor<T> {
    Tensor::param(shape, values.map(T::from_f64).collect()).expect("initializer shape")
}

/// Affine map with weight stored `[in, out]`.
pub struct LinearParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}
impl_module!(LinearParams { weight, bias });

impl<T: Scalar> LinearParams<T> {
    /// Truncated normal (std 0.02) weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        LinearParams {
            weight: param(&[fan_in, fan_out], (0..fan_in * fan_out).map(|_| rng.truncated_normal(0.02))),
            bias: bias.then(|| param(&[fan_out], std::iter::repeat_n(0.0, fan_out))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}
impl_module!(LayerNormParams { gamma, beta });

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(n: usize) -> Self {
        LayerNormParams {
            gamma: param(&[n], std::iter::repeat_n(1.0, n)),
            beta: param(&[n], std::iter::repeat_n(0.0, n)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(Some(&self.gamma), Some(&self.beta), LAYER_NORM_EPS)
    }
}

/// Cubic 3D convolution kernel `[c_out, c_in, k, k, k]` (or
/// `[c_in, c_out, k, k, k]` when used transposed).
pub struct ConvParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}
impl_module!(ConvParams { weight, bias });

impl<T: Scalar> ConvParams<T> {
    /// Uniform in ±1/√fan_in, zero bias.
    pub fn init(shape: [usize; 5], fan_in: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let c_bias = shape[0];
        ConvParams {
            weight: param(&shape, (0..n).map(|_| rng.uniform_range(-bound, bound))),
            bias: bias.then(|| param(&[c_bias], std::iter::repeat_n(0.0, c_bias))),
        }
    }
}
