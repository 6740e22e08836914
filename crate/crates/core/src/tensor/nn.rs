use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `(outer, n, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Normalizes groups of `n` values that sit `stride` apart. Returns the
/// normalized values and per-group `1/sqrt(var + eps)`.
fn normalize_groups<T: Scalar>(
    x: &[T],
    groups: impl Iterator<Item = usize> + Clone,
    n: usize,
    stride: usize,
    eps: T,
    out: &mut [T],
    inv_std: &mut Vec<T>,
) {
    let nf = T::from_usize(n);
    for base in groups {
        let mut mean = T::zero();
        for i in 0..n {
            mean = mean + x[base + i * stride];
        }
        mean = mean / nf;
        let mut var = T::zero();
        for i in 0..n {
            let d = x[base + i * stride] - mean;
            var = var + d * d;
        }
        var = var / nf;
        let r = T::one() / (var + eps).sqrt();
        for i in 0..n {
            out[base + i * stride] = (x[base + i * stride] - mean) * r;
        }
        inv_std.push(r);
    }
}

/// Backward of `y = (x - mean) * r` given `dy`, per group.
fn normalize_groups_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    groups: impl Iterator<Item = usize>,
    n: usize,
    stride: usize,
    inv_std: &[T],
    dx: &mut [T],
) {
    let nf = T::from_usize(n);
    for (base, &r) in groups.zip(inv_std) {
        let mut mg = T::zero();
        let mut mgy = T::zero();
        for i in 0..n {
            let k = base + i * stride;
            mg = mg + dy[k];
            mgy = mgy + dy[k] * y[k];
        }
        mg = mg / nf;
        mgy = mgy / nf;
        for i in 0..n {
            let k = base + i * stride;
            dx[k] = r * (dy[k] - mg - y[k] * mgy);
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("softmax axis {axis} for {:?}", self.shape())));
        }
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for c in 0..n {
                    mx = mx.max(x[base + c * inner]);
                }
                let mut s = T::zero();
                for c in 0..n {
                    let e = (x[base + c * inner] - mx).exp();
                    y[base + c * inner] = e;
                    s = s + e;
                }
                for c in 0..n {
                    y[base + c * inner] = y[base + c * inner] / s;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for c in 0..n {
                            dot = dot + g[base + c * inner] * y[base + c * inner];
                        }
                        for c in 0..n {
                            let k = base + c * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis, with optional affine
    /// parameters of that axis' length.
    pub fn layer_norm(&self, gamma: Option<&Tensor<T>>, beta: Option<&Tensor<T>>, eps: f64) -> Result<Self> {
        let n = *self.shape().last().ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if n == 0 {
            return Err(Error::dim("layer_norm over a zero-length axis"));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if p.shape() != [n] {
                return Err(Error::dim(format!(
                    "layer_norm parameter {:?} for normalized length {n}",
                    p.shape()
                )));
            }
        }
        let rows = self.numel() / n;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        normalize_groups(self.data(), (0..rows).map(|r| r * n), n, 1, T::from_f64(eps), &mut xhat, &mut inv_std);
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(g.data()).for_each(|(v, &s)| *v = *v * s);
            }
        }
        if let Some(b) = beta {
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, &s)| *v = *v + s);
            }
        }
        let mut parents = vec![self.clone()];
        parents.extend(gamma.cloned());
        parents.extend(beta.cloned());
        let gamma_t = gamma.cloned();
        let has_beta = beta.is_some();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            parents,
            Box::new(move |_, g, needs| {
                let mut res = Vec::with_capacity(3);
                let dxhat: Vec<T> = match &gamma_t {
                    Some(gm) => g
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(gm.data()).map(|(&a, &b)| a * b))
                        .collect(),
                    None => g.to_vec(),
                };
                res.push(needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    normalize_groups_backward(&xhat, &dxhat, (0..rows).map(|r| r * n), n, 1, &inv_std, &mut dx);
                    dx
                }));
                let mut k = 1;
                if gamma_t.is_some() {
                    res.push(needs[k].then(|| {
                        let mut dg = vec![T::zero(); n];
                        for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] = dg[j] + grow[j] * xrow[j];
                            }
                        }
                        dg
                    }));
                    k += 1;
                }
                if has_beta {
                    res.push(needs[k].then(|| {
                        let mut db = vec![T::zero(); n];
                        for grow in g.chunks(n) {
                            for j in 0..n {
                                db[j] = db[j] + grow[j];
                            }
                        }
                        db
                    }));
                }
                res
            }),
        ))
    }

    /// Instance normalization of a `[channels, spatial...]` tensor: each
    /// channel is standardized over its spatial extent (no affine).
    pub fn instance_norm(&self, eps: f64) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::dim(format!("instance_norm on {:?}", self.shape())));
        }
        let c = self.shape()[0];
        let s = self.numel() / c.max(1);
        if s == 0 {
            return Err(Error::dim("instance_norm over empty spatial extent"));
        }
        let mut y = vec![T::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(c);
        normalize_groups(self.data(), (0..c).map(|i| i * s), s, 1, T::from_f64(eps), &mut y, &mut inv_std);
        Ok(Tensor::from_op(
            "instance_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let mut dx = vec![T::zero(); g.len()];
                normalize_groups_backward(y, g, (0..c).map(|i| i * s), s, 1, &inv_std, &mut dx);
                vec![Some(dx)]
            }),
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Self {
        let half = T::from_f64(0.5);
        let rsqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let rsqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * rsqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * rsqrt2).erf());
                let pdf = rsqrt2pi * (-(half * x * x)).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let s = T::from_f64(slope);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Per-channel mean of a `[channels, spatial...]` tensor.
    pub fn global_avg_pool(&self) -> Result<Self> {
        if self.rank() < 2 || self.numel() == 0 {
            return Err(Error::dim(format!("global_avg_pool on {:?}", self.shape())));
        }
        let c = self.shape()[0];
        let s = self.numel() / c;
        let inv = T::one() / T::from_usize(s);
        let out: Vec<T> = self
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().fold(T::zero(), |a, b| a + b) * inv)
            .collect();
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                vec![Some(g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, s)).collect())]
            }),
        ))
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise the
    /// identity.
    pub fn dropout(&self, p: f64, rng: &mut Rng, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(g.iter().zip(&mask).map(|(&a, &m)| a * m).collect())]),
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self, axis)`.
    ///
    /// `targets` holds one class index per position, in the order obtained
    /// by removing `axis` from the shape.
    pub fn cross_entropy(&self, targets: &[usize], axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("cross_entropy axis {axis} for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if n < 2 {
            return Err(Error::dim("cross_entropy needs at least two classes"));
        }
        if targets.len() != outer * inner {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {} positions",
                targets.len(),
                outer * inner
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Data(format!("class index {bad} outside [0, {n})")));
        }
        let x = self.data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for c in 0..n {
                    mx = mx.max(x[base + c * inner]);
                }
                let mut s = T::zero();
                for c in 0..n {
                    let e = (x[base + c * inner] - mx).exp();
                    probs[base + c * inner] = e;
                    s = s + e;
                }
                for c in 0..n {
                    probs[base + c * inner] = probs[base + c * inner] / s;
                }
                let t = targets[o * inner + i];
                let lse = mx + s.ln();
                total += (lse - x[base + t * inner]).as_f64();
            }
        }
        let count = (outer * inner) as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            vec![],
            vec![T::from_f64(total / count)],
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let scale = g[0] / T::from_f64(count);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * n * inner + targets[o * inner + i] * inner + i;
                        gx[k] = gx[k] - scale;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
