use super::gemm::Layout;
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Batched product `[..., m, k] × [..., k, n]`.
    ///
    /// The right operand either carries the same batch dimensions or is a
    /// plain matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        let mismatch = || {
            Error::dim(format!(
                "matmul: {:?} × {:?}",
                self.shape(),
                other.shape()
            ))
        };
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        let batch_shape = &self.shape()[..ra - 2];
        let shared_b = rb == 2;
        if k != k2 || (!shared_b && &other.shape()[..rb - 2] != batch_shape) {
            return Err(mismatch());
        }
        let batch = numel(batch_shape);
        let mut out = vec![T::zero(); batch * m * n];
        let (sa, sb, sc) = (m * k, if shared_b { 0 } else { k * n }, m * n);
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data(),
                Layout::rows(k).at(bi * sa),
                other.data(),
                Layout::rows(n).at(bi * sb),
                T::zero(),
                &mut out,
                Layout::rows(n).at(bi * sc),
            );
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g, needs| {
                let ga = needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); batch * sa];
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g,
                            Layout::rows(n).at(bi * sc),
                            b.data(),
                            Layout::rows_t(n).at(bi * sb),
                            T::zero(),
                            &mut ga,
                            Layout::rows(k).at(bi * sa),
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    // dB = Aᵀ · G, summed over the batch when B is shared.
                    let mut gb = vec![T::zero(); if shared_b { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let beta = if shared_b && bi > 0 { T::one() } else { T::zero() };
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            a.data(),
                            Layout::rows_t(k).at(bi * sa),
                            g,
                            Layout::rows(n).at(bi * sc),
                            beta,
                            &mut gb,
                            Layout::rows(n).at(bi * sb),
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map on the last axis: `x · W + b` with `W` stored `[in, out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        let r = self.rank();
        if r == 0 || weight.rank() != 2 || self.shape()[r - 1] != weight.shape()[0] {
            return Err(Error::dim(format!(
                "linear: input {:?} with weight {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let (fin, fout) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {fout} outputs",
                    b.shape()
                )));
            }
        }
        let rows = self.numel() / fin.max(1);
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = bias {
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            fin,
            fout,
            T::one(),
            self.data(),
            Layout::rows(fin),
            weight.data(),
            Layout::rows(fout),
            beta,
            &mut out,
            Layout::rows(fout),
        );
        let mut shape = self.shape().to_vec();
        shape[r - 1] = fout;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, w) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            "linear",
            shape,
            out,
            parents,
            Box::new(move |_, g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * fin];
                    T::gemm(
                        rows,
                        fout,
                        fin,
                        T::one(),
                        g,
                        Layout::rows(fout),
                        w.data(),
                        Layout::rows_t(fout),
                        T::zero(),
                        &mut gx,
                        Layout::rows(fin),
                    );
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); fin * fout];
                    T::gemm(
                        fin,
                        rows,
                        fout,
                        T::one(),
                        x.data(),
                        Layout::rows_t(fin),
                        g,
                        Layout::rows(fout),
                        T::zero(),
                        &mut gw,
                        Layout::rows(fout),
                    );
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        gb
                    }));
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

    fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
        Tensor::new(shape, (0..numel(shape)).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_times_a() {
        let mut r = Rng::new(1);
        let a = rand_t(&[3, 3], &mut r);
        let eye = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn permutation_matrix_swaps_columns() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let p = Tensor::<f64>::from_f64(&[2, 2], &[0., 1., 1., 0.]).unwrap();
        assert_eq!(a.matmul(&p).unwrap().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut r = Rng::new(2);
        let a = rand_t(&[4, 5], &mut r);
        let b = rand_t(&[5, 3], &mut r);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn shared_rhs_batches() {
        let mut r = Rng::new(3);
        let a = rand_t(&[2, 3, 4], &mut r);
        let b = rand_t(&[4, 2], &mut r);
        let c = a.matmul(&b).unwrap();
        let c1 = a.slice(0, 1, 2).unwrap().reshape(&[3, 4]).unwrap().matmul(&b).unwrap();
        assert_eq!(&c.data()[6..], c1.data());
    }

    #[test]
    fn linear_equals_matmul_plus_bias() {
        let mut r = Rng::new(4);
        let x = rand_t(&[5, 3], &mut r);
        let w = rand_t(&[3, 2], &mut r);
        let b = rand_t(&[2], &mut r);
        let y = x.linear(&w, Some(&b)).unwrap();
        let z = x.matmul(&w).unwrap();
        for (i, (yv, zv)) in y.data().iter().zip(z.data()).enumerate() {
            assert!((yv - (zv + b.data()[i % 2])).abs() < 1e-12);
        }
    }
}
