//! Bringing volumes onto the network grid.
//!
//! In-plane axes are resampled linearly (half-pixel centres). Depth is
//! zero-padded symmetrically when the volume is shallower than the target
//! and resampled linearly when it is deeper. Intensities are then
//! z-scored over the real (non-padded) slices. Masks follow the same
//! geometry with nearest-neighbour sampling.

use super::nifti::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate of output sample `i` when resizing `n_in` to `n_out`.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

fn nearest(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Linear weights `(lo, hi, frac)` for every output sample.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(n_in - 1), s - lo as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Depth {
    /// Real slices occupy `[before, before + n)`.
    Pad { before: usize, n: usize },
    Resize,
}

fn depth_plan(nz: usize, tz: usize) -> Depth {
    if nz <= tz {
        Depth::Pad { before: (tz - nz) / 2, n: nz }
    } else {
        Depth::Resize
    }
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Parameter(format!("target dims {target:?} must be positive")));
    }
    Ok(())
}

/// Resampled volume as `[1, tz, ty, tx]`, z-scored over the real slices.
pub fn preprocess(v: &Volume, target: [usize; 3]) -> Result<Tensor<f32>> {
    check_target(target)?;
    let [nx, ny, nz] = v.dims;
    let [tx, ty, tz] = target;
    let xt = linear_taps(nx, tx);
    let yt = linear_taps(ny, ty);
    // In-plane first, all source slices.
    let mut plane = vec![0f64; nz * ty * tx];
    for z in 0..nz {
        let src = &v.data[z * ny * nx..(z + 1) * ny * nx];
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let s = |y: usize, x: usize| src[y * nx + x] as f64;
                let top = s(y0, x0) * (1.0 - fx) + s(y0, x1) * fx;
                let bot = s(y1, x0) * (1.0 - fx) + s(y1, x1) * fx;
                plane[(z * ty + oy) * tx + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let slice = ty * tx;
    let mut out = vec![0f64; tz * slice];
    let valid = match depth_plan(nz, tz) {
        Depth::Pad { before, n } => {
            out[before * slice..(before + n) * slice].copy_from_slice(&plane);
            before * slice..(before + n) * slice
        }
        Depth::Resize => {
            for (oz, &(z0, z1, fz)) in linear_taps(nz, tz).iter().enumerate() {
                for k in 0..slice {
                    out[oz * slice + k] = plane[z0 * slice + k] * (1.0 - fz) + plane[z1 * slice + k] * fz;
                }
            }
            0..tz * slice
        }
    };
    let region = &out[valid.clone()];
    let n = region.len() as f64;
    let mean = region.iter().sum::<f64>() / n;
    let var = region.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let inv = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for x in &mut out[valid] {
        *x = (*x - mean) * inv;
    }
    let data: Vec<f32> = out.iter().map(|&x| x as f32).collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite value after preprocessing".into()));
    }
    Tensor::new(&[1, tz, ty, tx], data)
}

/// Nearest-neighbour resampling of a label volume onto the target grid;
/// padded slices are background.
pub fn preprocess_mask(labels: &[u8], dims: [usize; 3], target: [usize; 3]) -> Result<Vec<u8>> {
    check_target(target)?;
    let [nx, ny, nz] = dims;
    let [tx, ty, tz] = target;
    if labels.len() != nx * ny * nz {
        return Err(Error::Data(format!("{} labels for dims {dims:?}", labels.len())));
    }
    let mut out = vec![0u8; tx * ty * tz];
    let plan = depth_plan(nz, tz);
    for oz in 0..tz {
        let z = match plan {
            Depth::Pad { before, n } => match oz.checked_sub(before).filter(|&z| z < n) {
                Some(z) => z,
                None => continue,
            },
            Depth::Resize => nearest(oz, nz, tz),
        };
        for oy in 0..ty {
            let y = nearest(oy, ny, ty);
            for ox in 0..tx {
                out[(oz * ty + oy) * tx + ox] = labels[(z * ny + y) * nx + nearest(ox, nx, tx)];
            }
        }
    }
    Ok(out)
}

/// Maps labels predicted on the target grid back to the original dims.
pub fn restore_labels(labels: &[u8], target: [usize; 3], original: [usize; 3]) -> Result<Vec<u8>> {
    let [tx, ty, tz] = target;
    let [nx, ny, nz] = original;
    if labels.len() != tx * ty * tz {
        return Err(Error::Data(format!("{} labels for target {target:?}", labels.len())));
    }
    let plan = depth_plan(nz, tz);
    let mut out = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        let sz = match plan {
            Depth::Pad { before, .. } => z + before,
            Depth::Resize => nearest(z, tz, nz),
        };
        for y in 0..ny {
            let sy = nearest(y, ty, ny);
            for x in 0..nx {
                out[(z * ny + y) * nx + x] = labels[(sz * ty + sy) * tx + nearest(x, tx, nx)];
            }
        }
    }
    Ok(out)
}

/// Voxel spacing of the preprocessed grid, in tensor order `[z, y, x]`.
pub fn preprocessed_spacing(spacing: [f64; 3], dims: [usize; 3], target: [usize; 3]) -> [f64; 3] {
    let sx = spacing[0] * dims[0] as f64 / target[0] as f64;
    let sy = spacing[1] * dims[1] as f64 / target[1] as f64;
    let sz = match depth_plan(dims[2], target[2]) {
        Depth::Pad { .. } => spacing[2],
        Depth::Resize => spacing[2] * dims[2] as f64 / target[2] as f64,
    };
    [sz, sy, sx]
}
