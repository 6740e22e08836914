//! Bounds-checked strided GEMM on top of `matrixmultiply`.

/// Placement of an m×n matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout { off: 0, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn rows_t(cols: usize) -> Self {
        Layout { off: 0, rs: 1, cs: cols }
    }

    pub fn at(self, off: usize) -> Self {
        Layout { off, ..self }
    }

    fn check(&self, rows: usize, cols: usize, len: usize, what: &str) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "gemm: {what} out of bounds ({last} >= {len})");
    }
}

pub trait Gemm: Sized {
    /// C ← alpha·A·B + beta·C with A m×k, B k×n, C m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        la: Layout,
        b: &[Self],
        lb: Layout,
        beta: Self,
        c: &mut [Self],
        lc: Layout,
    );
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                la: Layout,
                b: &[Self],
                lb: Layout,
                beta: Self,
                c: &mut [Self],
                lc: Layout,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                lc.check(m, n, c.len(), "C");
                if k == 0 {
                    // matrixmultiply requires k > 0; C ← beta·C.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = lc.off + i * lc.rs + j * lc.cs;
                            c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
                        }
                    }
                    return;
                }
                la.check(m, k, a.len(), "A");
                lb.check(k, n, b.len(), "B");
                // SAFETY: every index touched by the kernel lies within the
                // slices, as verified by the layout checks above. The output
                // does not alias the inputs because it is a distinct &mut slice.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr().add(la.off),
                        la.rs as isize,
                        la.cs as isize,
                        b.as_ptr().add(lb.off),
                        lb.rs as isize,
                        lb.cs as isize,
                        beta,
                        c.as_mut_ptr().add(lc.off),
                        lc.rs as isize,
                        lc.cs as isize,
                    );
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);
