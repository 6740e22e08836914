//! Random spatial augmentation applied identically to image and mask.
//!
//! A draw produces an [`AugmentPlan`] (which axes to flip, optional zoom,
//! optional in-plane rotation); applying a plan is deterministic. Images
//! are resampled linearly and masks by nearest neighbour, with zero fill
//! outside the source grid.

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_zoom: f64,
    pub zoom_range: (f64, f64),
    pub p_rotate: f64,
    /// Radians.
    pub max_angle: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.2,
            p_zoom: 0.1,
            zoom_range: (0.9, 1.1),
            p_rotate: 0.1,
            max_angle: 15f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    /// Flip per tensor axis `[z, y, x]`, applied in sequence.
    pub flips: Vec<usize>,
    pub zoom: Option<f64>,
    /// In-plane rotation angle, radians.
    pub rotate: Option<f64>,
}

impl AugmentPlan {
    /// Always consumes the same number of draws, whatever triggers.
    pub fn draw(rng: &mut Rng, cfg: &AugmentConfig) -> AugmentPlan {
        let mut flips = Vec::new();
        for axis in 0..3 {
            if rng.bernoulli(cfg.p_flip) {
                flips.push(axis);
            }
        }
        let zoom_hit = rng.bernoulli(cfg.p_zoom);
        let zoom = rng.uniform_range(cfg.zoom_range.0, cfg.zoom_range.1);
        let rot_hit = rng.bernoulli(cfg.p_rotate);
        let angle = rng.uniform_range(-cfg.max_angle, cfg.max_angle);
        AugmentPlan { flips, zoom: zoom_hit.then_some(zoom), rotate: rot_hit.then_some(angle) }
    }

    pub fn is_identity(&self) -> bool {
        self.flips.is_empty() && self.zoom.is_none() && self.rotate.is_none()
    }

    /// Applies the plan to an image (and mask) laid out `[z, y, x]`.
    pub fn apply(&self, img: &[f32], mask: Option<&[u8]>, dims: [usize; 3]) -> (Vec<f32>, Option<Vec<u8>>) {
        let mut img = img.to_vec();
        let mut mask = mask.map(<[u8]>::to_vec);
        for &axis in &self.flips {
            img = flip(&img, dims, axis);
            mask = mask.map(|m| flip(&m, dims, axis));
        }
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        if let Some(s) = self.zoom {
            let map = |p: [f64; 3]| [c[0] + (p[0] - c[0]) / s, c[1] + (p[1] - c[1]) / s, c[2] + (p[2] - c[2]) / s];
            img = resample_linear(&img, dims, map);
            mask = mask.map(|m| resample_nearest(&m, dims, map));
        }
        if let Some(a) = self.rotate {
            let (sin, cos) = (-a).sin_cos();
            let map = |p: [f64; 3]| {
                let (dy, dx) = (p[1] - c[1], p[2] - c[2]);
                [p[0], c[1] + sin * dx + cos * dy, c[2] + cos * dx - sin * dy]
            };
            img = resample_linear(&img, dims, map);
            mask = mask.map(|m| resample_nearest(&m, dims, map));
        }
        (img, mask)
    }
}

/// Draws a plan and applies it.
pub fn augment(
    img: &[f32],
    mask: Option<&[u8]>,
    dims: [usize; 3],
    rng: &mut Rng,
    cfg: &AugmentConfig,
) -> (Vec<f32>, Option<Vec<u8>>) {
    AugmentPlan::draw(rng, cfg).apply(img, mask, dims)
}

fn flip<T: Copy>(v: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.push(v[(sz * h + sy) * w + sx]);
            }
        }
    }
    out
}

fn resample_linear(v: &[f32], dims: [usize; 3], map: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let at = |z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            0.0
        } else {
            v[(z as usize * h + y as usize) * w + x as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let s = map([z as f64, y as f64, x as f64]);
                let b = s.map(|c| c.floor());
                let f = [s[0] - b[0], s[1] - b[1], s[2] - b[2]];
                let b = b.map(|c| c as isize);
                let mut acc = 0.0;
                for corner in 0..8 {
                    let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                    let wgt: f64 = (0..3).map(|i| if o[i] == 1 { f[i] } else { 1.0 - f[i] }).product();
                    if wgt != 0.0 {
                        acc += wgt * at(b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize);
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

fn resample_nearest(v: &[u8], dims: [usize; 3], map: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<u8> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let s = map([z as f64, y as f64, x as f64]).map(|c| c.round());
                let inside = s[0] >= 0.0
                    && s[1] >= 0.0
                    && s[2] >= 0.0
                    && s[0] < d as f64
                    && s[1] < h as f64
                    && s[2] < w as f64;
                out.push(if inside { v[(s[0] as usize * h + s[1] as usize) * w + s[2] as usize] } else { 0 });
            }
        }
    }
    out
}
