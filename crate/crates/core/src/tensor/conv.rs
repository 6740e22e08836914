//! 3D convolution and transposed convolution on `[channels, d, h, w]`
//! tensors with cubic kernels.
//!
//! Stride-1 convolution is evaluated as `k³` strided GEMMs over the padded
//! input: with the padded volume flattened, the input read by output voxel
//! `o` at kernel offset `(a, b, c)` sits at `base(o) + off(a, b, c)`, so each
//! kernel tap is a single GEMM against a shifted view of the padded buffer.
//! Outputs are produced on the padded grid ("wide" layout) and the valid
//! interior is extracted afterwards. Strided convolutions gather each tap
//! explicitly.

use super::gemm::Layout;
use super::ops::{extract_block, insert_block};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn dims3(t: &[usize]) -> [usize; 3] {
    [t[1], t[2], t[3]]
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], per_channel: usize) {
    for (ch, &b) in out.chunks_mut(per_channel).zip(bias) {
        ch.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], per_channel: usize) -> Vec<T> {
    g.chunks(per_channel)
        .map(|ch| ch.iter().copied().fold(T::zero(), |a, b| a + b))
        .collect()
}

struct Geometry {
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    padded: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn taps(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let k = self.k;
        (0..k * k * k).map(move |t| (t, [t / (k * k), (t / k) % k, t % k]))
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Length of the wide output and the flat offset of each tap.
    fn wide(&self) -> (usize, Vec<usize>) {
        let [_, ph, pw] = self.padded;
        let [od, oh, ow] = self.output;
        let len = (od - 1) * ph * pw + (oh - 1) * pw + ow;
        let offs = self.taps().map(|(_, [a, b, c])| a * ph * pw + b * pw + c).collect();
        (len, offs)
    }
}

fn pad_input<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let mut xp = vec![T::zero(); g.ci * g.padded_len()];
    let [d, h, w] = g.input;
    let [pd, ph, pw] = g.padded;
    insert_block(x, &[g.ci, d, h, w], &mut xp, &[g.ci, pd, ph, pw], &[0, g.pad, g.pad, g.pad]);
    xp
}

/// Valid-output voxel `o` -> its position in the wide layout.
fn wide_index(g: &Geometry) -> Vec<usize> {
    let [_, ph, pw] = g.padded;
    let [od, oh, ow] = g.output;
    let mut idx = Vec::with_capacity(g.out_len());
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                idx.push(z * ph * pw + y * pw + x);
            }
        }
    }
    idx
}

/// Flat padded-input index read by each output voxel for one tap (strided path).
fn tap_index(g: &Geometry, tap: [usize; 3]) -> Vec<usize> {
    let [_, ph, pw] = g.padded;
    let [od, oh, ow] = g.output;
    let s = g.stride;
    let mut idx = Vec::with_capacity(g.out_len());
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                idx.push((z * s + tap[0]) * ph * pw + (y * s + tap[1]) * pw + x * s + tap[2]);
            }
        }
    }
    idx
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[c_in, d, h, w]` with `[c_out, c_in, k, k, k]`.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        let err = |msg: &str| {
            Error::dim(format!(
                "conv3d: {msg} (input {:?}, weight {:?}, stride {stride}, padding {padding})",
                self.shape(),
                weight.shape()
            ))
        };
        if self.rank() != 4 || weight.rank() != 5 {
            return Err(err("expected rank-4 input and rank-5 weight"));
        }
        let (co, ci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if weight.shape()[3] != k || weight.shape()[4] != k {
            return Err(err("kernel must be cubic"));
        }
        if ci != self.shape()[0] {
            return Err(err("channel mismatch"));
        }
        if stride == 0 || k == 0 {
            return Err(err("stride and kernel must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(err("bias length"));
            }
        }
        let input = dims3(self.shape());
        let padded = input.map(|n| n + 2 * padding);
        if padded.iter().any(|&n| n < k) {
            return Err(err("non-positive output size"));
        }
        let output = padded.map(|n| (n - k) / stride + 1);
        let g = Geometry { ci, k, stride, pad: padding, input, padded, output };
        let k3 = k * k * k;
        let vp = g.padded_len();
        let vo = g.out_len();
        let xp = pad_input(self.data(), &g);
        let w = weight.data();
        // W_tap viewed as [co × ci]: element (o, i) at o·ci·k³ + i·k³ + tap.
        let wl = move |tap: usize| Layout { off: tap, rs: ci * k3, cs: k3 };

        let mut out = vec![T::zero(); co * vo];
        if stride == 1 {
            let (len, offs) = g.wide();
            let mut wide = vec![T::zero(); co * len];
            for (tap, _) in g.taps() {
                T::gemm(co, ci, len, T::one(), w, wl(tap), &xp, Layout { off: offs[tap], rs: vp, cs: 1 }, T::one(), &mut wide, Layout::rows(len));
            }
            let idx = wide_index(&g);
            for c in 0..co {
                let src = &wide[c * len..(c + 1) * len];
                for (o, &i) in out[c * vo..(c + 1) * vo].iter_mut().zip(&idx) {
                    *o = src[i];
                }
            }
        } else {
            let mut cols = vec![T::zero(); ci * vo];
            for (tap, pos) in g.taps() {
                let idx = tap_index(&g, pos);
                for c in 0..ci {
                    let src = &xp[c * vp..(c + 1) * vp];
                    for (d, &i) in cols[c * vo..(c + 1) * vo].iter_mut().zip(&idx) {
                        *d = src[i];
                    }
                }
                T::gemm(co, ci, vo, T::one(), w, wl(tap), &cols, Layout::rows(vo), T::one(), &mut out, Layout::rows(vo));
            }
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), vo);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            "conv3d",
            vec![co, output[0], output[1], output[2]],
            out,
            parents,
            Box::new(move |_, gout, needs| {
                let xp = pad_input(x.data(), &g);
                let w = wt.data();
                let mut gxp = needs[0].then(|| vec![T::zero(); ci * vp]);
                let mut gw = needs[1].then(|| vec![T::zero(); co * ci * k3]);
                if stride == 1 {
                    let (len, offs) = g.wide();
                    let mut gwide = vec![T::zero(); co * len];
                    let idx = wide_index(&g);
                    for c in 0..co {
                        let dst = &mut gwide[c * len..(c + 1) * len];
                        for (&v, &i) in gout[c * vo..(c + 1) * vo].iter().zip(&idx) {
                            dst[i] = v;
                        }
                    }
                    for (tap, _) in g.taps() {
                        if let Some(gxp) = gxp.as_mut() {
                            // dXp[:, off + j] += W_tapᵀ · G_wide[:, j]
                            T::gemm(ci, co, len, T::one(), w, Layout { off: tap, rs: k3, cs: ci * k3 }, &gwide, Layout::rows(len), T::one(), gxp, Layout { off: offs[tap], rs: vp, cs: 1 });
                        }
                        if let Some(gw) = gw.as_mut() {
                            // dW_tap += G_wide · Xp_shiftedᵀ
                            T::gemm(co, len, ci, T::one(), &gwide, Layout::rows(len), &xp, Layout { off: offs[tap], rs: 1, cs: vp }, T::one(), gw, wl(tap));
                        }
                    }
                } else {
                    let mut cols = vec![T::zero(); ci * vo];
                    for (tap, pos) in g.taps() {
                        let idx = tap_index(&g, pos);
                        if let Some(gw) = gw.as_mut() {
                            for c in 0..ci {
                                let src = &xp[c * vp..(c + 1) * vp];
                                for (d, &i) in cols[c * vo..(c + 1) * vo].iter_mut().zip(&idx) {
                                    *d = src[i];
                                }
                            }
                            T::gemm(co, vo, ci, T::one(), gout, Layout::rows(vo), &cols, Layout::rows_t(vo), T::one(), gw, wl(tap));
                        }
                        if let Some(gxp) = gxp.as_mut() {
                            T::gemm(ci, co, vo, T::one(), w, Layout { off: tap, rs: k3, cs: ci * k3 }, gout, Layout::rows(vo), T::zero(), &mut cols, Layout::rows(vo));
                            for c in 0..ci {
                                let dst = &mut gxp[c * vp..(c + 1) * vp];
                                for (&v, &i) in cols[c * vo..(c + 1) * vo].iter().zip(&idx) {
                                    dst[i] = dst[i] + v;
                                }
                            }
                        }
                    }
                }
                let gx = gxp.map(|gxp| {
                    if g.pad == 0 {
                        gxp
                    } else {
                        let [pd, ph, pw] = g.padded;
                        let [d, h, ww] = g.input;
                        extract_block(&gxp, &[ci, pd, ph, pw], &[0, g.pad, g.pad, g.pad], &[ci, d, h, ww])
                    }
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| bias_grad(gout, vo)));
                }
                res
            }),
        ))
    }

    /// Transposed convolution of `[c_in, d, h, w]` with `[c_in, c_out, k, k, k]`
    /// (no padding): each output axis has length `(n - 1)·stride + k`. Its
    /// gradient with respect to the input is the matching `conv3d`.
    pub fn conv_transpose3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize) -> Result<Self> {
        let err = |msg: &str| {
            Error::dim(format!(
                "conv_transpose3d: {msg} (input {:?}, weight {:?})",
                self.shape(),
                weight.shape()
            ))
        };
        if self.rank() != 4 || weight.rank() != 5 {
            return Err(err("expected rank-4 input and rank-5 weight"));
        }
        let (ci, co, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if weight.shape()[3] != k || weight.shape()[4] != k || ci != self.shape()[0] || stride == 0 || k == 0 {
            return Err(err("incompatible shapes"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(err("bias length"));
            }
        }
        let input = dims3(self.shape());
        if input.iter().any(|&n| n == 0) {
            return Err(err("empty input"));
        }
        let output = input.map(|n| (n - 1) * stride + k);
        let k3 = k * k * k;
        let vi: usize = input.iter().product();
        let vo: usize = output.iter().product();
        let taps: Vec<Vec<usize>> = (0..k3)
            .map(|t| {
                let (a, b, c) = (t / (k * k), (t / k) % k, t % k);
                let mut idx = Vec::with_capacity(vi);
                for z in 0..input[0] {
                    for y in 0..input[1] {
                        for x in 0..input[2] {
                            idx.push(((z * stride + a) * output[1] + y * stride + b) * output[2] + x * stride + c);
                        }
                    }
                }
                idx
            })
            .collect();
        // W_tap as [co × ci]: element (o, i) at i·co·k³ + o·k³ + tap.
        let wl = move |tap: usize| Layout { off: tap, rs: k3, cs: co * k3 };
        let w = weight.data();
        let mut out = vec![T::zero(); co * vo];
        let mut buf = vec![T::zero(); co * vi];
        for (tap, idx) in taps.iter().enumerate() {
            T::gemm(co, ci, vi, T::one(), w, wl(tap), self.data(), Layout::rows(vi), T::zero(), &mut buf, Layout::rows(vi));
            for c in 0..co {
                let dst = &mut out[c * vo..(c + 1) * vo];
                for (&v, &i) in buf[c * vi..(c + 1) * vi].iter().zip(idx) {
                    dst[i] = dst[i] + v;
                }
            }
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), vo);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            "conv_transpose3d",
            vec![co, output[0], output[1], output[2]],
            out,
            parents,
            Box::new(move |_, gout, needs| {
                let w = wt.data();
                let mut gx = needs[0].then(|| vec![T::zero(); ci * vi]);
                let mut gw = needs[1].then(|| vec![T::zero(); ci * co * k3]);
                let mut gtap = vec![T::zero(); co * vi];
                for (tap, idx) in taps.iter().enumerate() {
                    for c in 0..co {
                        let src = &gout[c * vo..(c + 1) * vo];
                        for (d, &i) in gtap[c * vi..(c + 1) * vi].iter_mut().zip(idx) {
                            *d = src[i];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(ci, co, vi, T::one(), w, Layout { off: tap, rs: co * k3, cs: k3 }, &gtap, Layout::rows(vi), T::one(), gx, Layout::rows(vi));
                    }
                    if let Some(gw) = gw.as_mut() {
                        T::gemm(co, vi, ci, T::one(), &gtap, Layout::rows(vi), x.data(), Layout::rows_t(vi), T::one(), gw, wl(tap));
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| bias_grad(gout, vo)));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::numel;

    fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
        Tensor::new(shape, (0..numel(shape)).map(|_| r.normal()).collect()).unwrap()
    }

    /// Direct seven-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
        let [ci, d, h, ww] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let od = (d + 2 * p - k) / s + 1;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (ww + 2 * p - k) / s + 1;
        let mut out = vec![0.0; co * od * oh * ow];
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for i in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let iz = (z * s + a) as isize - p as isize;
                                        let iy = (y * s + bb) as isize - p as isize;
                                        let ix = (xx * s + c) as isize - p as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= ww as isize {
                                            continue;
                                        }
                                        let xv = x.data()[((i * d + iz as usize) * h + iy as usize) * ww + ix as usize];
                                        let wv = w.data()[(((o * ci + i) * k + a) * k + bb) * k + c];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((o * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        (vec![co, od, oh, ow], out)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut r = Rng::new(1);
        let x = rand_t(&[1, 3, 4, 5], &mut r);
        let w = Tensor::<f64>::full(&[1, 1, 1, 1, 1], 1.0);
        assert_eq!(x.conv3d(&w, None, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_counts() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 4], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        let y = x.conv3d(&w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn matches_naive_loops() {
        let mut r = Rng::new(2);
        for &(s, p, k) in &[(1, 1, 3), (1, 0, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (3, 2, 3)] {
            let x = rand_t(&[2, 5, 6, 4], &mut r);
            let w = rand_t(&[3, 2, k, k, k], &mut r);
            let b = rand_t(&[3], &mut r);
            let y = x.conv3d(&w, Some(&b), s, p).unwrap();
            let (shape, oracle) = naive_conv(&x, &w, Some(b.data()), s, p);
            assert_eq!(y.shape(), shape.as_slice());
            for (a, o) in y.data().iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-10, "s={s} p={p} k={k}");
            }
        }
    }

    #[test]
    fn too_small_input_is_dimension_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(x.conv3d(&w, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_single_voxel_gives_block() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        let y = x.conv_transpose3d(&w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
        let z = Tensor::<f64>::zeros(&[1, 2, 3, 2]).conv_transpose3d(&w, None, 2).unwrap();
        assert_eq!(z.shape(), &[1, 4, 6, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut r = Rng::new(5);
        for &(s, k) in &[(2, 2), (1, 3), (2, 3)] {
            let x = rand_t(&[2, 3, 4, 3], &mut r);
            let w = rand_t(&[3, 2, k, k, k], &mut r);
            let cx = x.conv3d(&w, None, s, 0).unwrap();
            let y = rand_t(cx.shape(), &mut r);
            // conv: [co=3, ci=2]; the transposed op takes [c_in=3, c_out=2].
            let ty = y.conv_transpose3d(&w, None, s).unwrap();
            // Inputs past the last full window are never read by the conv;
            // the transposed output stops short of them.
            let pads: Vec<(usize, usize)> = x.shape().iter().zip(ty.shape()).map(|(&a, &b)| (0, a - b)).collect();
            let ty = ty.pad_constant(&pads, 0.0).unwrap();
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "s={s} k={k}: {lhs} vs {rhs}");
        }
    }
}
