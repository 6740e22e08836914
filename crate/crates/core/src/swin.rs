//! 3D shifted-window transformer pieces.
//!
//! Token grids are channel-last tensors `[D, H, W, C]`. Windows are cubes of
//! edge `M`; the shifted variant rolls the grid by `-s` on every axis before
//! partitioning and masks attention between tokens that were not contiguous
//! before the roll.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::params::{LayerNormParams, LinearParams};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Additive mask value for pairs of tokens from different regions.
pub const MASK_NEG: f64 = -1e9;

/// A token grid together with its window geometry.
#[derive(Clone)]
pub struct WindowGrid<T: Scalar = f32> {
    pub tokens: Tensor<T>,
    pub window: usize,
    pub shift: usize,
}

impl<T: Scalar> WindowGrid<T> {
    pub fn new(tokens: Tensor<T>, window: usize, shift: usize) -> Result<Self> {
        grid_dims(&tokens)?;
        if window == 0 || shift >= window {
            return Err(Error::Config(format!("window {window} with shift {shift}: need 0 <= s < M")));
        }
        Ok(WindowGrid { tokens, window, shift })
    }

    pub fn dims(&self) -> [usize; 3] {
        grid_dims(&self.tokens).expect("validated on construction")
    }

    pub fn partition(&self) -> Result<Tensor<T>> {
        window_partition(&self.tokens, self.window)
    }
}

fn grid_dims<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 3]> {
    match x.shape() {
        [d, h, w, _] => Ok([*d, *h, *w]),
        s => Err(Error::dim(format!("token grid must be [D, H, W, C], got {s:?}"))),
    }
}

/// Zero-pads the trailing side of each spatial axis up to a multiple of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let dims = grid_dims(x)?;
    let pads: Vec<(usize, usize)> = dims
        .iter()
        .map(|&n| (0, n.div_ceil(m) * m - n))
        .chain([(0, 0)])
        .collect();
    if pads.iter().all(|p| p.1 == 0) {
        return Ok(x.clone());
    }
    x.pad_constant(&pads, T::zero())
}

fn flat(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// Toroidal roll: token at position `i` moves to `(i + offset) mod n` on
/// each axis.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, offsets: [isize; 3]) -> Result<Tensor<T>> {
    let dims = grid_dims(x)?;
    if offsets.iter().zip(dims).all(|(&o, n)| o.rem_euclid(n as isize) == 0) {
        return Ok(x.clone());
    }
    let src = |o: usize, axis: usize| -> usize {
        let n = dims[axis] as isize;
        (o as isize - offsets[axis]).rem_euclid(n) as usize
    };
    let mut index = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for w in 0..dims[2] {
                index.push(Some(flat(dims, src(z, 0), src(y, 1), src(w, 2))));
            }
        }
    }
    x.gather_rows(Arc::new(index), &dims)
}

fn check_divisible(dims: [usize; 3], m: usize) -> Result<()> {
    if m == 0 || dims.iter().any(|&n| n % m != 0) {
        return Err(Error::dim(format!("grid {dims:?} is not a multiple of window {m}")));
    }
    Ok(())
}

/// Source grid position of token `t` in window `w`, both in row-major order.
fn window_index(dims: [usize; 3], m: usize) -> Vec<usize> {
    let nw = [dims[0] / m, dims[1] / m, dims[2] / m];
    let mut index = Vec::with_capacity(dims.iter().product());
    for wz in 0..nw[0] {
        for wy in 0..nw[1] {
            for wx in 0..nw[2] {
                for tz in 0..m {
                    for ty in 0..m {
                        for tx in 0..m {
                            index.push(flat(dims, wz * m + tz, wy * m + ty, wx * m + tx));
                        }
                    }
                }
            }
        }
    }
    index
}

/// `[D, H, W, C]` → `[n_windows, M³, C]`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let dims = grid_dims(x)?;
    check_divisible(dims, m)?;
    let index: Vec<Option<usize>> = window_index(dims, m).into_iter().map(Some).collect();
    let nw = index.len() / (m * m * m);
    x.gather_rows(Arc::new(index), &[nw, m * m * m])
}

/// `[n_windows, M³, C]` → `[D, H, W, C]`.
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, m: usize, dims: [usize; 3]) -> Result<Tensor<T>> {
    check_divisible(dims, m)?;
    let n: usize = dims.iter().product();
    if windows.rank() != 3 || windows.shape()[0] * windows.shape()[1] != n || windows.shape()[1] != m * m * m {
        return Err(Error::dim(format!(
            "window_reverse: windows {:?} for grid {dims:?} and M={m}",
            windows.shape()
        )));
    }
    let mut index = vec![None; n];
    for (row, pos) in window_index(dims, m).into_iter().enumerate() {
        index[pos] = Some(row);
    }
    windows.gather_rows(Arc::new(index), &dims)
}

/// Pairwise region equality inside each shifted window.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    pub windows: usize,
    pub tokens: usize,
    /// `same[(w * tokens + i) * tokens + j]` is true when tokens `i` and `j`
    /// of window `w` came from the same region.
    pub same: Vec<bool>,
}

impl ShiftMask {
    pub fn is_zero(&self) -> bool {
        self.same.iter().all(|&b| b)
    }

    pub fn value(&self, w: usize, i: usize, j: usize) -> f64 {
        if self.same[(w * self.tokens + i) * self.tokens + j] {
            0.0
        } else {
            MASK_NEG
        }
    }

    /// Dense additive mask `[windows, 1, tokens, tokens]`.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let neg = T::from_f64(MASK_NEG);
        let data = self.same.iter().map(|&b| if b { T::zero() } else { neg }).collect();
        Tensor::new(&[self.windows, 1, self.tokens, self.tokens], data).expect("mask shape")
    }
}

/// Region labels for a padded grid rolled by `-s`: each axis is split into
/// bands `[0, n-M)`, `[n-M, n-s)` and `[n-s, n)`.
pub fn build_shift_mask(dims: [usize; 3], m: usize, s: usize) -> Result<ShiftMask> {
    check_divisible(dims, m)?;
    if s >= m {
        return Err(Error::Config(format!("shift {s} must be below window {m}")));
    }
    let band = |i: usize, n: usize| -> usize {
        if s == 0 || i < n - m {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let mut label = vec![0usize; dims.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                label[flat(dims, z, y, x)] = band(z, dims[0]) * 9 + band(y, dims[1]) * 3 + band(x, dims[2]);
            }
        }
    }
    let t = m * m * m;
    let index = window_index(dims, m);
    let mut same = Vec::with_capacity(index.len() * t);
    for win in index.chunks(t) {
        for &a in win {
            same.extend(win.iter().map(|&b| label[a] == label[b]));
        }
    }
    Ok(ShiftMask { windows: index.len() / t, tokens: t, same })
}

pub struct AttentionParams<T: Scalar = f32> {
    pub qkv: LinearParams<T>,
    pub proj: LinearParams<T>,
}
impl_module!(AttentionParams { qkv, proj });

pub struct MlpParams<T: Scalar = f32> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}
impl_module!(MlpParams { fc1, fc2 });

impl<T: Scalar> MlpParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// One pre-norm transformer sub-block (attention then MLP).
pub struct BlockParams<T: Scalar = f32> {
    pub norm1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
    pub heads: usize,
}
impl_module!(BlockParams { norm1, attn, norm2, mlp });

pub const MLP_RATIO: usize = 4;

impl<T: Scalar> BlockParams<T> {
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {dim} channels")));
        }
        let hidden = MLP_RATIO * dim;
        Ok(BlockParams {
            norm1: LayerNormParams::new(dim),
            attn: AttentionParams {
                qkv: LinearParams::init(dim, 3 * dim, true, rng),
                proj: LinearParams::init(dim, dim, true, rng),
            },
            norm2: LayerNormParams::new(dim),
            mlp: MlpParams {
                fc1: LinearParams::init(dim, hidden, true, rng),
                fc2: LinearParams::init(hidden, dim, true, rng),
            },
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.norm1.gamma.numel()
    }
}

/// Regular-window sub-block followed by a shifted-window sub-block.
pub struct SwinPair<T: Scalar = f32> {
    pub regular: BlockParams<T>,
    pub shifted: BlockParams<T>,
}
impl_module!(SwinPair { regular, shifted });

impl<T: Scalar> SwinPair<T> {
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SwinPair { regular: BlockParams::init(dim, heads, rng)?, shifted: BlockParams::init(dim, heads, rng)? })
    }
}

pub struct PatchMergingParams<T: Scalar = f32> {
    pub norm: LayerNormParams<T>,
    pub reduction: LinearParams<T>,
}
impl_module!(PatchMergingParams { norm, reduction });

impl<T: Scalar> PatchMergingParams<T> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        PatchMergingParams {
            norm: LayerNormParams::new(8 * dim),
            reduction: LinearParams::init(8 * dim, 2 * dim, true, rng),
        }
    }
}

/// Multi-head self-attention inside each window.
///
/// Returns the projected output `[n, T, C]` and the post-softmax attention
/// weights `[n, h, T, T]`.
pub fn window_mhsa<T: Scalar>(
    windows: &Tensor<T>,
    params: &AttentionParams<T>,
    heads: usize,
    mask: Option<&ShiftMask>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, t, c) = match windows.shape() {
        [n, t, c] => (*n, *t, *c),
        s => return Err(Error::dim(format!("window_mhsa expects [n, T, C], got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let d = c / heads;
    // [n, T, 3, h, d] → [3, n, h, T, d]
    let qkv = params
        .qkv
        .forward(windows)?
        .reshape(&[n, t, 3, heads, d])?
        .permute(&[2, 0, 3, 1, 4])?;
    let q = qkv.slice(0, 0, 1)?.reshape(&[n, heads, t, d])?;
    let k = qkv.slice(0, 1, 2)?.reshape(&[n, heads, t, d])?;
    let v = qkv.slice(0, 2, 3)?.reshape(&[n, heads, t, d])?;
    let mut scores = q.matmul(&k.transpose_last()?)?.scale(T::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(mask) = mask.filter(|m| !m.is_zero()) {
        if mask.windows != n || mask.tokens != t {
            return Err(Error::dim(format!(
                "mask for {} windows of {} tokens applied to {n}×{t}",
                mask.windows, mask.tokens
            )));
        }
        let dense = mask.additive::<T>();
        let dense = Tensor::concat(&vec![dense; heads], 1)?;
        scores = scores.add(&dense)?;
    }
    let attn = scores.softmax(3)?;
    let out = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, c])?;
    Ok((params.proj.forward(&out)?, attn))
}

/// One pre-norm sub-block: attention in (optionally shifted) windows with a
/// residual, then the MLP with a residual.
pub fn transformer_block<T: Scalar>(z: &Tensor<T>, p: &BlockParams<T>, m: usize, s: usize) -> Result<Tensor<T>> {
    let dims = grid_dims(z)?;
    let c = z.shape()[3];
    let h = pad_to_multiple(&p.norm1.forward(z)?, m)?;
    let padded = grid_dims(&h)?;
    let (h, mask) = if s > 0 {
        let si = s as isize;
        (cyclic_shift(&h, [-si, -si, -si])?, Some(build_shift_mask(padded, m, s)?))
    } else {
        (h, None)
    };
    let (a, _) = window_mhsa(&window_partition(&h, m)?, &p.attn, p.heads, mask.as_ref())?;
    let mut a = window_reverse(&a, m, padded)?;
    if s > 0 {
        let si = s as isize;
        a = cyclic_shift(&a, [si, si, si])?;
    }
    if padded != dims {
        a = a.crop(&[0, 0, 0, 0], &[dims[0], dims[1], dims[2], c])?;
    }
    let zhat = z.add(&a)?;
    zhat.add(&p.mlp.forward(&p.norm2.forward(&zhat)?)?)
}

/// Regular then shifted sub-block (shift `⌊M/2⌋`).
pub fn swin_block<T: Scalar>(z: &Tensor<T>, pair: &SwinPair<T>, m: usize) -> Result<Tensor<T>> {
    let z = transformer_block(z, &pair.regular, m, 0)?;
    transformer_block(&z, &pair.shifted, m, m / 2)
}

/// Splits `[c, D, H, W]` into non-overlapping `p³` patches and projects each
/// to the embedding width, giving `[D/p, H/p, W/p, C₀]`.
pub fn patch_embed<T: Scalar>(volume: &Tensor<T>, proj: &LinearParams<T>, p: usize) -> Result<Tensor<T>> {
    let (c, d, h, w) = match volume.shape() {
        [c, d, h, w] => (*c, *d, *h, *w),
        s => return Err(Error::dim(format!("patch_embed expects [c, D, H, W], got {s:?}"))),
    };
    if p == 0 || d % p != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("volume {:?} is not a multiple of patch {p}", volume.shape())));
    }
    let patches = volume
        .reshape(&[c, d / p, p, h / p, p, w / p, p])?
        .permute(&[1, 3, 5, 0, 2, 4, 6])?
        .reshape(&[d / p, h / p, w / p, c * p * p * p])?;
    proj.forward(&patches)
}

/// Concatenates each 2×2×2 neighbourhood (odd dims are zero-padded), then
/// layer-norms and reduces `8C → 2C`.
pub fn patch_merging<T: Scalar>(x: &Tensor<T>, p: &PatchMergingParams<T>) -> Result<Tensor<T>> {
    let x = pad_to_multiple(x, 2)?;
    let [d, h, w] = grid_dims(&x)?;
    let c = x.shape()[3];
    let merged = x
        .reshape(&[d / 2, 2, h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[d / 2, h / 2, w / 2, 8 * c])?;
    p.reduction.forward(&p.norm.forward(&merged)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Module;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    fn block(dim: usize, heads: usize, seed: u64) -> BlockParams<f64> {
        let mut r = Rng::new(seed);
        let mut b = BlockParams::init(dim, heads, &mut r).unwrap();
        // Larger weights than the 0.02 init so attention is far from uniform.
        b.visit_mut("", &mut |_, t| {
            let v = t.data().iter().map(|_| r.normal() * 0.5).collect();
            *t = t.with_data(v).unwrap();
        });
        b
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn partition_counts() {
        let x = Tensor::<f64>::zeros(&[4, 4, 4, 3]);
        assert_eq!(window_partition(&x, 2).unwrap().shape(), &[8, 8, 3]);
        assert_eq!(window_partition(&x, 4).unwrap().shape(), &[1, 64, 3]);
        assert!(window_partition(&Tensor::<f64>::zeros(&[3, 4, 4, 1]), 2).is_err());
    }

    #[test]
    fn partition_places_tokens() {
        let x = Tensor::<f64>::new(&[2, 4, 2, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        let w = window_partition(&x, 2).unwrap();
        // Second window covers y in 2..4: grid positions (z, y, x) with flat
        // index z*8 + y*2 + x.
        assert_eq!(&w.data()[8..], &[4., 5., 6., 7., 12., 13., 14., 15.]);
    }

    #[test]
    fn shift_one_axis() {
        let x = Tensor::<f64>::new(&[1, 1, 4, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(cyclic_shift(&x, [0, 0, 2]).unwrap().data(), &[3., 4., 1., 2.]);
        assert_eq!(cyclic_shift(&x, [0, 0, -1]).unwrap().data(), &[2., 3., 4., 1.]);
    }

    proptest! {
        #[test]
        fn partition_roundtrip(seed in 0u64..1000, m in 1usize..4, a in 1usize..3, b in 1usize..3, c in 1usize..3) {
            let mut r = Rng::new(seed);
            let dims = [a * m, b * m, c * m];
            let x = rand_t(&[dims[0], dims[1], dims[2], 2], &mut r);
            let back = window_reverse(&window_partition(&x, m).unwrap(), m, dims).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn shift_roundtrip_and_energy(seed in 0u64..1000, s0 in -5isize..5, s1 in -5isize..5, s2 in -5isize..5) {
            let mut r = Rng::new(seed);
            let x = rand_t(&[3, 4, 2, 2], &mut r);
            let y = cyclic_shift(&x, [s0, s1, s2]).unwrap();
            let back = cyclic_shift(&y, [-s0, -s1, -s2]).unwrap();
            prop_assert_eq!(back.data(), x.data());
            // Same multiset of values, so the sorted energy sums agree exactly.
            let e = |t: &Tensor<f64>| {
                let mut sq: Vec<f64> = t.data().iter().map(|v| v * v).collect();
                sq.sort_by(f64::total_cmp);
                sq.iter().sum::<f64>()
            };
            prop_assert_eq!(e(&x), e(&y));
        }
    }

    #[test]
    fn zero_shift_mask_is_zero() {
        let m = build_shift_mask([4, 4, 4], 2, 0).unwrap();
        assert!(m.is_zero());
    }

    #[test]
    fn mask_symmetric_with_zero_diagonal() {
        let m = build_shift_mask([4, 6, 2], 2, 1).unwrap();
        for w in 0..m.windows {
            for i in 0..m.tokens {
                assert_eq!(m.value(w, i, i), 0.0);
                for j in 0..m.tokens {
                    assert_eq!(m.value(w, i, j), m.value(w, j, i));
                }
            }
        }
    }

    #[test]
    fn one_axis_mask_by_hand() {
        // Length 4 along x, M=2, s=1. After rolling by -1 the grid holds
        // original positions [1, 2, 3, 0]. Bands on the rolled grid: [0, 2)
        // -> 0, [2, 3) -> 1, [3, 4) -> 2. The first window (rolled 0, 1)
        // is one region; the second (rolled 2, 3 = original 3 and 0) wraps
        // and mixes two regions.
        let m = build_shift_mask([2, 2, 4], 2, 1).unwrap();
        // Two windows along x. Token index bit 0 is the x offset, so tokens
        // i and i^1 differ only in x.
        let same_x = |w: usize, i: usize| m.value(w, i, i ^ 1) == 0.0;
        assert!(same_x(0, 0));
        assert!(!same_x(1, 0));
    }

    /// Masked attention equals independent attention per region.
    #[test]
    fn masked_attention_matches_region_split() {
        let dims = [4, 4, 4];
        let (m, s, c, heads) = (2, 1, 4, 2);
        let mut r = Rng::new(11);
        let x = rand_t(&[dims[0], dims[1], dims[2], c], &mut r);
        let p = block(c, heads, 12);
        let mask = build_shift_mask(dims, m, s).unwrap();
        let wins = window_partition(&x, m).unwrap();
        let (out, _) = window_mhsa(&wins, &p.attn, heads, Some(&mask)).unwrap();
        let t = m * m * m;
        for w in 0..mask.windows {
            let rows = &wins.data()[w * t * c..(w + 1) * t * c];
            let mut done = vec![false; t];
            for i in 0..t {
                if done[i] {
                    continue;
                }
                let members: Vec<usize> = (0..t).filter(|&j| mask.value(w, i, j) == 0.0).collect();
                let mut sub = Vec::new();
                for &j in &members {
                    sub.extend_from_slice(&rows[j * c..(j + 1) * c]);
                    done[j] = true;
                }
                let sub = Tensor::new(&[1, members.len(), c], sub).unwrap();
                let (o, _) = window_mhsa(&sub, &p.attn, heads, None).unwrap();
                for (k, &j) in members.iter().enumerate() {
                    let got = &out.data()[(w * t + j) * c..(w * t + j + 1) * c];
                    assert!(max_diff(got, &o.data()[k * c..(k + 1) * c]) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_token_window_is_projected_value() {
        let mut r = Rng::new(3);
        let p = block(6, 3, 4);
        let x = rand_t(&[5, 1, 6], &mut r);
        let (out, attn) = window_mhsa(&x, &p.attn, 3, None).unwrap();
        assert!(attn.data().iter().all(|&a| a == 1.0));
        let v = p.attn.qkv.forward(&x).unwrap().slice(2, 12, 18).unwrap();
        let expect = p.attn.proj.forward(&v).unwrap();
        assert!(max_diff(out.data(), expect.data()) < 1e-12);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut r = Rng::new(5);
        let p = block(4, 2, 6);
        let tok = rand_t(&[1, 1, 4], &mut r);
        let x = Tensor::concat(&vec![tok.clone(); 8], 1).unwrap();
        let (out, attn) = window_mhsa(&x, &p.attn, 2, None).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 0.125).abs() < 1e-12));
        let (single, _) = window_mhsa(&tok, &p.attn, 2, None).unwrap();
        for row in out.data().chunks(4) {
            assert!(max_diff(row, single.data()) < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let p = block(4, 2, 1);
        let x = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(matches!(window_mhsa(&x, &p.attn, 3, None), Err(Error::Config(_))));
        assert!(matches!(BlockParams::<f32>::init(6, 4, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    /// Direct per-window, per-head loops.
    fn naive_attention(x: &[f64], n: usize, t: usize, c: usize, h: usize, p: &AttentionParams<f64>) -> Vec<f64> {
        let lin = |v: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            (0..fo).map(|o| b.data()[o] + (0..fi).map(|i| v[i] * w.data()[i * fo + o]).sum::<f64>()).collect()
        };
        let d = c / h;
        let mut out = Vec::new();
        for w in 0..n {
            let qkv: Vec<Vec<f64>> = (0..t)
                .map(|i| lin(&x[(w * t + i) * c..(w * t + i + 1) * c], &p.qkv.weight, p.qkv.bias.as_ref().unwrap()))
                .collect();
            for i in 0..t {
                let mut cat = vec![0.0; c];
                for head in 0..h {
                    let q = &qkv[i][head * d..(head + 1) * d];
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            let k = &qkv[j][c + head * d..c + (head + 1) * d];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..t {
                        for k in 0..d {
                            cat[head * d + k] += e[j] / z * qkv[j][2 * c + head * d + k];
                        }
                    }
                }
                out.extend(lin(&cat, &p.proj.weight, p.proj.bias.as_ref().unwrap()));
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive_loops() {
        let mut r = Rng::new(7);
        let p = block(6, 2, 8);
        let x = rand_t(&[2, 8, 6], &mut r);
        let (out, attn) = window_mhsa(&x, &p.attn, 2, None).unwrap();
        assert!(max_diff(out.data(), &naive_attention(x.data(), 2, 8, 6, 2, &p.attn)) < 1e-6);
        for row in attn.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_projections_make_block_identity() {
        let mut r = Rng::new(9);
        let mut pair = SwinPair::<f64>::init(6, 3, &mut r).unwrap();
        for b in [&mut pair.regular, &mut pair.shifted] {
            for lin in [&mut b.attn.proj, &mut b.mlp.fc2] {
                lin.weight = Tensor::zeros(lin.weight.shape());
            }
        }
        let x = rand_t(&[4, 4, 3, 6], &mut r);
        let y = swin_block(&x, &pair, 2).unwrap();
        assert!(max_diff(x.data(), y.data()) < 1e-6);
    }

    #[test]
    fn unshifted_sub_block_is_plain_window_attention() {
        let mut r = Rng::new(13);
        let p = block(4, 2, 14);
        let x = rand_t(&[4, 4, 4, 4], &mut r);
        let a = transformer_block(&x, &p, 2, 0).unwrap();
        let mask = build_shift_mask([4, 4, 4], 2, 0).unwrap();
        let wins = window_partition(&p.norm1.forward(&x).unwrap(), 2).unwrap();
        let (o, _) = window_mhsa(&wins, &p.attn, 2, Some(&mask)).unwrap();
        let zhat = x.add(&window_reverse(&o, 2, [4, 4, 4]).unwrap()).unwrap();
        let b = zhat.add(&p.mlp.forward(&p.norm2.forward(&zhat).unwrap()).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// Straight-line evaluation of the two sub-blocks on raw buffers: explicit
    /// coordinate arithmetic for the roll and windows, direct region labels
    /// computed from pre-roll coordinates.
    fn straight_line_pair(x: &[f64], n: usize, c: usize, m: usize, pair: &SwinPair<f64>) -> Vec<f64> {
        let ln = |v: &[f64], p: &LayerNormParams<f64>| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(i, a)| (a - mu) / (var + 1e-5).sqrt() * p.gamma.data()[i] + p.beta.data()[i])
                .collect()
        };
        let lin = |v: &[f64], l: &LinearParams<f64>| -> Vec<f64> {
            let (fi, fo) = (l.fan_in(), l.fan_out());
            (0..fo)
                .map(|o| l.bias.as_ref().unwrap().data()[o] + (0..fi).map(|i| v[i] * l.weight.data()[i * fo + o]).sum::<f64>())
                .collect()
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let idx = |z: usize, y: usize, w: usize| (z * n + y) * n + w;
        let mut z: Vec<Vec<f64>> = x.chunks(c).map(|v| v.to_vec()).collect();
        for (p, s) in [(&pair.regular, 0), (&pair.shifted, m / 2)] {
            let h: Vec<Vec<f64>> = z.iter().map(|v| ln(v, &p.norm1)).collect();
            // Region of an original coordinate under the roll: the rolled
            // coordinate is (i - s) mod n.
            let band = |i: usize| {
                let r = (i + n - s) % n;
                if s == 0 || r < n - m {
                    0
                } else if r < n - s {
                    1
                } else {
                    2
                }
            };
            let mut attn_out = vec![vec![0.0; c]; n * n * n];
            let nw = n / m;
            for wz in 0..nw {
                for wy in 0..nw {
                    for wx in 0..nw {
                        // Original coordinates of this rolled window's tokens.
                        let mut toks = Vec::new();
                        for tz in 0..m {
                            for ty in 0..m {
                                for tx in 0..m {
                                    let o = |r: usize| (r + s) % n;
                                    let (a, b, cc) = (o(wz * m + tz), o(wy * m + ty), o(wx * m + tx));
                                    toks.push((idx(a, b, cc), band(a) * 9 + band(b) * 3 + band(cc)));
                                }
                            }
                        }
                        let qkv: Vec<Vec<f64>> = toks.iter().map(|&(i, _)| lin(&h[i], &p.attn.qkv)).collect();
                        let d = c / p.heads;
                        for (ti, &(i, reg)) in toks.iter().enumerate() {
                            let mut cat = vec![0.0; c];
                            for hd in 0..p.heads {
                                let sc: Vec<f64> = toks
                                    .iter()
                                    .enumerate()
                                    .map(|(tj, &(_, rj))| {
                                        let dot: f64 = (0..d).map(|k| qkv[ti][hd * d + k] * qkv[tj][c + hd * d + k]).sum();
                                        dot / (d as f64).sqrt() + if rj == reg { 0.0 } else { -1e9 }
                                    })
                                    .collect();
                                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                                let e: Vec<f64> = sc.iter().map(|v| (v - mx).exp()).collect();
                                let tot: f64 = e.iter().sum();
                                for tj in 0..toks.len() {
                                    for k in 0..d {
                                        cat[hd * d + k] += e[tj] / tot * qkv[tj][2 * c + hd * d + k];
                                    }
                                }
                            }
                            attn_out[i] = lin(&cat, &p.attn.proj);
                        }
                    }
                }
            }
            for (zi, a) in z.iter_mut().zip(&attn_out) {
                for (v, av) in zi.iter_mut().zip(a) {
                    *v += av;
                }
                let hidden: Vec<f64> = lin(&ln(zi, &p.norm2), &p.mlp.fc1).into_iter().map(gelu).collect();
                let mlp = lin(&hidden, &p.mlp.fc2);
                for (v, mv) in zi.iter_mut().zip(mlp) {
                    *v += mv;
                }
            }
        }
        z.concat()
    }

    #[test]
    fn swin_block_matches_straight_line() {
        let mut r = Rng::new(21);
        let c = 4;
        let pair = SwinPair { regular: block(c, 2, 22), shifted: block(c, 2, 23) };
        let x = rand_t(&[4, 4, 4, c], &mut r);
        let y = swin_block(&x, &pair, 2).unwrap();
        assert!(max_diff(y.data(), &straight_line_pair(x.data(), 4, c, 2, &pair)) < 1e-5);
    }

    #[test]
    fn odd_grid_is_padded_and_cropped() {
        let mut r = Rng::new(31);
        let pair = SwinPair::<f64>::init(6, 3, &mut r).unwrap();
        let x = rand_t(&[3, 5, 2, 6], &mut r);
        assert_eq!(swin_block(&x, &pair, 2).unwrap().shape(), &[3, 5, 2, 6]);
    }

    #[test]
    fn patch_embed_counts_and_identity() {
        let mut r = Rng::new(1);
        let vol = rand_t(&[1, 4, 4, 4], &mut r);
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        let proj = LinearParams { weight: Tensor::new(&[8, 8], eye).unwrap(), bias: None };
        let tok = patch_embed(&vol, &proj, 2).unwrap();
        assert_eq!(tok.shape(), &[2, 2, 2, 8]);
        // Token (0, 0, 1) holds the patch at z 0..2, y 0..2, x 2..4.
        let expect: Vec<f64> = [(0, 0, 2), (0, 0, 3), (0, 1, 2), (0, 1, 3), (1, 0, 2), (1, 0, 3), (1, 1, 2), (1, 1, 3)]
            .iter()
            .map(|&(z, y, x)| vol.data()[z * 16 + y * 4 + x])
            .collect();
        assert_eq!(&tok.data()[8..16], &expect[..]);
    }

    #[test]
    fn patch_embed_equals_strided_conv() {
        let mut r = Rng::new(2);
        let (ci, co, p) = (2, 5, 2);
        let vol = rand_t(&[ci, 4, 6, 2], &mut r);
        let w = rand_t(&[co, ci, p, p, p], &mut r);
        let b = rand_t(&[co], &mut r);
        let conv = vol.conv3d(&w, Some(&b), p, 0).unwrap();
        // Linear weight [(ci, a, b, c), co] is the transposed conv kernel.
        let lw = w.reshape(&[co, ci * 8]).unwrap().transpose_last().unwrap();
        let proj = LinearParams { weight: lw, bias: Some(b) };
        let tok = patch_embed(&vol, &proj, p).unwrap();
        let tok_cf = tok.permute(&[3, 0, 1, 2]).unwrap();
        assert_eq!(tok_cf.shape(), conv.shape());
        assert!(max_diff(tok_cf.data(), conv.data()) < 1e-6);
    }

    #[test]
    fn merging_counts_and_constant() {
        let mut r = Rng::new(3);
        let c = 3;
        let mut p = PatchMergingParams::<f64>::init(c, &mut r);
        let x = rand_t(&[2, 2, 2, c], &mut r);
        assert_eq!(patch_merging(&x, &p).unwrap().shape(), &[1, 1, 1, 2 * c]);
        p.reduction.weight = Tensor::zeros(&[8 * c, 2 * c]);
        p.reduction.bias = Some(Tensor::full(&[2 * c], 0.7));
        let y = patch_merging(&Tensor::full(&[4, 2, 6, c], 1.5), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(y.shape(), &[2, 1, 3, 2 * c]);
    }

    #[test]
    fn merging_matches_gather_oracle() {
        let mut r = Rng::new(4);
        let c = 2;
        let mut p = PatchMergingParams::<f64>::init(c, &mut r);
        p.norm.gamma = rand_t(&[8 * c], &mut r);
        p.norm.beta = rand_t(&[8 * c], &mut r);
        let x = rand_t(&[3, 4, 2, c], &mut r);
        let y = patch_merging(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1, 2 * c]);
        let at = |z: usize, yy: usize, w: usize, ch: usize| {
            if z < 3 { x.data()[((z * 4 + yy) * 2 + w) * c + ch] } else { 0.0 }
        };
        let mut expect = Vec::new();
        for z in 0..2 {
            for yy in 0..2 {
                let mut v = Vec::new();
                for a in 0..2 {
                    for b in 0..2 {
                        for cc in 0..2 {
                            for ch in 0..c {
                                v.push(at(2 * z + a, 2 * yy + b, cc, ch));
                            }
                        }
                    }
                }
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64;
                let nv: Vec<f64> = v
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (a - mu) / (var + 1e-5).sqrt() * p.norm.gamma.data()[i] + p.norm.beta.data()[i])
                    .collect();
                let (fo, wt) = (2 * c, p.reduction.weight.data());
                for o in 0..fo {
                    expect.push(nv.iter().enumerate().map(|(i, a)| a * wt[i * fo + o]).sum::<f64>());
                }
            }
        }
        assert!(max_diff(y.data(), &expect) < 1e-6);
    }
}
