//! Wall-time scaling of shifted-window attention with the token count.

use std::time::Instant;

use crate::error::Result;
use crate::rng::Rng;
use crate::swin::{build_shift_mask, cyclic_shift, window_mhsa, window_partition, window_reverse, AttentionParams};
use crate::params::LinearParams;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug)]
pub struct BenchPoint {
    pub dims: [usize; 3],
    pub tokens: usize,
    /// Fastest of the repetitions.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingBench {
    pub window: usize,
    pub channels: usize,
    pub small: BenchPoint,
    pub large: BenchPoint,
}

impl ScalingBench {
    /// Time ratio for twice the tokens.
    pub fn ratio(&self) -> f64 {
        self.large.seconds / self.small.seconds
    }

    pub fn to_text(&self) -> String {
        let line = |p: &BenchPoint| {
            format!("{:>2}x{:>2}x{:>2} {:>6} tokens  {:>9.3} ms\n", p.dims[0], p.dims[1], p.dims[2], p.tokens, p.seconds * 1e3)
        };
        format!(
            "shifted-window attention, M={}, C={}\n{}{}ratio {:.3}\n",
            self.window,
            self.channels,
            line(&self.small),
            line(&self.large),
            self.ratio()
        )
    }
}

/// One shifted-window attention pass over a `[D, H, W, C]` grid: roll,
/// partition, masked attention, reverse, roll back.
pub fn shifted_window_attention(grid: &Tensor<f32>, attn: &AttentionParams<f32>, heads: usize, m: usize) -> Result<Tensor<f32>> {
    let s = m / 2;
    let si = s as isize;
    let dims = [grid.shape()[0], grid.shape()[1], grid.shape()[2]];
    let mask = build_shift_mask(dims, m, s)?;
    let rolled = cyclic_shift(grid, [-si, -si, -si])?;
    let (out, _) = window_mhsa(&window_partition(&rolled, m)?, attn, heads, Some(&mask))?;
    cyclic_shift(&window_reverse(&out, m, dims)?, [si, si, si])
}

fn random_grid(dims: [usize; 3], channels: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let n = dims.iter().product::<usize>() * channels;
    Tensor::new(&[dims[0], dims[1], dims[2], channels], (0..n).map(|_| rng.normal() as f32).collect())
}

fn time_once(grid: &Tensor<f32>, attn: &AttentionParams<f32>, heads: usize, m: usize) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(shifted_window_attention(grid, attn, heads, m)?);
    Ok(start.elapsed().as_secs_f64())
}

/// Times a `base` grid and the same grid doubled along its first axis.
pub fn attention_scaling(base: [usize; 3], window: usize, channels: usize, heads: usize, reps: usize) -> Result<ScalingBench> {
    let _guard = no_grad();
    let mut rng = Rng::new(0xbe4c);
    let attn = AttentionParams {
        qkv: LinearParams::init(channels, 3 * channels, true, &mut rng),
        proj: LinearParams::init(channels, channels, true, &mut rng),
    };
    let dims = [base, [2 * base[0], base[1], base[2]]];
    let grids = [random_grid(dims[0], channels, &mut rng)?, random_grid(dims[1], channels, &mut rng)?];
    // Interleaved, keeping the fastest run of each, so that background load
    // hits both sizes alike.
    let mut best = [f64::INFINITY; 2];
    for _ in 0..=reps.max(1) {
        for (b, g) in best.iter_mut().zip(&grids) {
            *b = b.min(time_once(g, &attn, heads, window)?);
        }
    }
    let point = |i: usize| BenchPoint { dims: dims[i], tokens: dims[i].iter().product(), seconds: best[i] };
    let (small, large) = (point(0), point(1));
    Ok(ScalingBench { window, channels, small, large })
}
