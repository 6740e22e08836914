//! Elementwise arithmetic, reductions and shape manipulation.

use std::sync::Arc;

use super::{check_same_shape, numel, Scalar, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every row (last axis) of a block of shape `block` and reports the
/// flat offsets of that row in the source and destination buffers.
fn for_each_row(
    block: &[usize],
    src_shape: &[usize],
    src_origin: &[usize],
    dst_shape: &[usize],
    dst_origin: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = block.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    if block.iter().any(|&b| b == 0) {
        return;
    }
    let ss = strides(src_shape);
    let ds = strides(dst_shape);
    let row = block[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        let mut so = src_origin[rank - 1];
        let mut doff = dst_origin[rank - 1];
        for a in 0..rank - 1 {
            so += (src_origin[a] + idx[a]) * ss[a];
            doff += (dst_origin[a] + idx[a]) * ds[a];
        }
        f(so, doff, row);
        // Advance the multi-index over the leading axes.
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < block[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Copies the block `[origin, origin + block)` of `src` into a new buffer.
pub(crate) fn extract_block<T: Copy + Default>(
    src: &[T],
    src_shape: &[usize],
    origin: &[usize],
    block: &[usize],
) -> Vec<T> {
    let mut out = vec![T::default(); numel(block)];
    let zeros = vec![0; block.len()];
    for_each_row(block, src_shape, origin, block, &zeros, |so, d, n| {
        out[d..d + n].copy_from_slice(&src[so..so + n]);
    });
    out
}

/// Writes all of `src` into `dst` at `origin`.
pub(crate) fn insert_block<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    origin: &[usize],
) {
    let zeros = vec![0; src_shape.len()];
    for_each_row(src_shape, src_shape, &zeros, dst_shape, origin, |so, d, n| {
        dst[d..d + n].copy_from_slice(&src[so..so + n]);
    });
}

pub(crate) fn permute_buffer<T: Copy + Default>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![T::default(); data.len()];
    if data.is_empty() {
        return out;
    }
    if rank == 0 {
        out[0] = data[0];
        return out;
    }
    // Source stride for each output axis.
    let st: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let inner = out_shape[rank - 1];
    let inner_stride = st[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    loop {
        let base: usize = (0..rank - 1).map(|a| idx[a] * st[a]).sum();
        if inner_stride == 1 {
            out[o..o + inner].copy_from_slice(&data[base..base + inner]);
        } else {
            for j in 0..inner {
                out[o + j] = data[base + j * inner_stride];
            }
        }
        o += inner;
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Self {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |y, g, _| {
                let gx = x.data().iter().zip(y).zip(g).map(|((&xv, &yv), &gv)| gv * df(xv, yv)).collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect()),
                ]
            }),
        ))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor<T>) -> Result<Self> {
        check_same_shape("div", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        let b = other.clone();
        Ok(Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |y, g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(&gv, &bv)| gv / bv).collect()),
                    needs[1].then(|| {
                        g.iter().zip(b.data()).zip(y).map(|((&gv, &bv), &yv)| -gv * yv / bv).collect()
                    }),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.unary("add_scalar", |v| v + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Self {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Self {
        self.unary("ln", |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().fold(T::zero(), |a, b| a + b);
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Self {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / T::from_usize(n))
    }

    /// Sums scalars (or equal-shaped tensors) into one tensor.
    pub fn sum_all(items: &[Tensor<T>]) -> Result<Self> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Usage("sum_all of an empty list".into()))?;
        rest.iter().try_fold(first.clone(), |acc, t| acc.add(t))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permute {:?} is not a permutation of {} axes",
                axes, rank
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_buffer(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(permute_buffer(g, &grad_shape, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose_last needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn concat(items: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} for rank {rank}")));
        }
        for t in items {
            let ok = t.rank() == rank
                && (0..rank).all(|a| a == axis || t.shape()[a] == first.shape()[a]);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = items.iter().map(|t| t.shape()[axis]).sum();
        let mut data = vec![T::zero(); numel(&out_shape)];
        let mut offsets = Vec::with_capacity(items.len());
        let mut pos = 0;
        for t in items {
            let mut origin = vec![0; rank];
            origin[axis] = pos;
            insert_block(t.data(), t.shape(), &mut data, &out_shape, &origin);
            offsets.push((origin, t.shape().to_vec()));
            pos += t.shape()[axis];
        }
        let gshape = out_shape.clone();
        Ok(Tensor::from_op(
            "concat",
            out_shape,
            data,
            items.to_vec(),
            Box::new(move |_, g, needs| {
                offsets
                    .iter()
                    .zip(needs)
                    .map(|((origin, shape), &need)| need.then(|| extract_block(g, &gshape, origin, shape)))
                    .collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start > end || end > self.shape()[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                self.shape()
            )));
        }
        let mut origin = vec![0; self.rank()];
        origin[axis] = start;
        let mut block = self.shape().to_vec();
        block[axis] = end - start;
        self.crop(&origin, &block)
    }

    /// The sub-block starting at `origin` with extent `block`.
    pub fn crop(&self, origin: &[usize], block: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if origin.len() != rank
            || block.len() != rank
            || (0..rank).any(|a| origin[a] + block[a] > self.shape()[a])
        {
            return Err(Error::dim(format!(
                "crop origin {:?} extent {:?} outside {:?}",
                origin,
                block,
                self.shape()
            )));
        }
        if origin.iter().all(|&o| o == 0) && block == self.shape() {
            return Ok(self.clone());
        }
        let data = extract_block(self.data(), self.shape(), origin, block);
        let in_shape = self.shape().to_vec();
        let origin = origin.to_vec();
        let bshape = block.to_vec();
        Ok(Tensor::from_op(
            "crop",
            block.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); numel(&in_shape)];
                insert_block(g, &bshape, &mut gx, &in_shape, &origin);
                vec![Some(gx)]
            }),
        ))
    }

    /// Pads every axis with `(before, after)` copies of `value`.
    pub fn pad_constant(&self, pads: &[(usize, usize)], value: T) -> Result<Self> {
        if pads.len() != self.rank() {
            return Err(Error::dim(format!(
                "pad spec of length {} for rank {}",
                pads.len(),
                self.rank()
            )));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&n, &(a, b))| n + a + b)
            .collect();
        let origin: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let mut data = vec![value; numel(&out_shape)];
        insert_block(self.data(), self.shape(), &mut data, &out_shape, &origin);
        let in_shape = self.shape().to_vec();
        let oshape = out_shape.clone();
        Ok(Tensor::from_op(
            "pad_constant",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| vec![Some(extract_block(g, &oshape, &origin, &in_shape))]),
        ))
    }

    /// Row gather: views `self` as `[rows, row_len]` (row = last axis) and
    /// builds output row `i` from input row `index[i]`, or zeros for `None`.
    /// The output has shape `lead ++ [row_len]`.
    pub fn gather_rows(&self, index: Arc<Vec<Option<usize>>>, lead: &[usize]) -> Result<Self> {
        let row = *self.shape().last().ok_or_else(|| Error::dim("gather_rows on a scalar"))?;
        let rows = if row == 0 { 0 } else { self.numel() / row };
        if numel(lead) != index.len() {
            return Err(Error::dim(format!(
                "gather_rows: {} indices for output rows {:?}",
                index.len(),
                lead
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows: row {bad} of {rows}")));
        }
        let mut data = vec![T::zero(); index.len() * row];
        for (o, src) in index.iter().enumerate() {
            if let Some(s) = src {
                data[o * row..(o + 1) * row].copy_from_slice(&self.data()[s * row..(s + 1) * row]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(row);
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "gather_rows",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g, _| {
                let mut gx = vec![T::zero(); n_in];
                for (o, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        let dst = &mut gx[s * row..(s + 1) * row];
                        for (d, &v) in dst.iter_mut().zip(&g[o * row..(o + 1) * row]) {
                            *d = *d + v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
