//! Synthetic short-axis cardiac phantoms with graded motion artifacts.
//!
//! Geometry: an ellipsoidal LV blood pool, a myocardial shell around it and
//! a crescent RV on one side, set inside a textured body ellipse. Motion is
//! emulated with ghosting (shifted, attenuated copies along the
//! phase-encode axis y) followed by blur along y. Both grow with the motion
//! class.
//!
//! Three independent streams are forked from the caller's rng: geometry,
//! noise and artifacts. The same rng with a different class therefore gives
//! the same anatomy and noise with different artifacts.

use super::manifest::Phase;
use super::nifti::{Datatype, Volume};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MIN_DIMS: [usize; 3] = [32, 32, 8];
/// Field of view in mm (x, y, z) mapped onto whatever grid is requested.
pub const FIELD_OF_VIEW: [f64; 3] = [256.0, 256.0, 160.0];
const INTENSITY_SCALE: f32 = 400.0;

pub struct Phantom {
    pub image: Volume,
    /// Labels 0 background, 1 LV, 2 MYO, 3 RV.
    pub mask: Volume,
    /// The image before ghosting and blur (anatomy, texture and noise).
    pub clean: Vec<f32>,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Ghost amplitude range per class; `u` from the artifact stream picks a
/// point inside it, so classes never overlap.
fn ghost_amplitude(class: u8, u: f64) -> f64 {
    let (lo, hi) = match class {
        1 => (0.02, 0.05),
        2 => (0.10, 0.16),
        _ => (0.25, 0.35),
    };
    lo + (hi - lo) * u
}

fn blur_sigma(class: u8, u: f64) -> f64 {
    [0.4, 0.9, 1.6][class as usize - 1] + 0.2 * u
}

pub fn generate_phantom(rng: &Rng, motion_class: u8, phase: Phase, dims: [usize; 3]) -> Result<Phantom> {
    if !(1..=3).contains(&motion_class) {
        return Err(Error::Parameter(format!("motion class {motion_class} is not 1, 2 or 3")));
    }
    if (0..3).any(|i| dims[i] < MIN_DIMS[i]) {
        return Err(Error::Parameter(format!(
            "phantom dims {}x{}x{} are below the minimum {}x{}x{}",
            dims[0], dims[1], dims[2], MIN_DIMS[0], MIN_DIMS[1], MIN_DIMS[2]
        )));
    }
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut geo = rng.fork(0);
    let mut noise = rng.fork(1);
    let mut art = rng.fork(2);

    // Geometry in normalized coordinates (each axis spans [0, 1]).
    let scale = match phase {
        Phase::Ed => 1.0,
        Phase::Es => 0.78,
    };
    let c = [
        0.5 + geo.uniform_range(-0.04, 0.04) + 0.04,
        0.5 + geo.uniform_range(-0.04, 0.04),
        0.5 + geo.uniform_range(-0.04, 0.04),
    ];
    let ru = geo.uniform_range(0.10, 0.13) * scale;
    let lv = Ellipsoid { center: c, radii: [ru, ru * geo.uniform_range(0.9, 1.1), geo.uniform_range(0.26, 0.32)] };
    let t = geo.uniform_range(0.045, 0.06) * if phase == Phase::Es { 1.3 } else { 1.0 };
    let myo_outer = Ellipsoid {
        center: c,
        radii: [lv.radii[0] + t, lv.radii[1] + t, lv.radii[2] + 0.1],
    };
    let ro = myo_outer.radii[0];
    let rv = Ellipsoid {
        center: [c[0] - 0.95 * ro, c[1] + geo.uniform_range(-0.02, 0.02), c[2]],
        radii: [1.15 * ro, 1.45 * myo_outer.radii[1], lv.radii[2] * 0.95],
    };
    let body = Ellipsoid { center: [0.5, 0.5, 0.5], radii: [0.44, 0.37, 10.0] };
    let freq = [geo.uniform_range(2.0, 4.0), geo.uniform_range(2.0, 4.0), geo.uniform_range(0.0, 6.3)];

    let at = |x: usize, y: usize, z: usize| [(x as f64 + 0.5) / nx as f64, (y as f64 + 0.5) / ny as f64, (z as f64 + 0.5) / nz as f64];
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut labels = vec![0u8; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = at(x, y, z);
                labels[idx(x, y, z)] = if lv.contains(p) {
                    1
                } else if myo_outer.contains(p) {
                    2
                } else if rv.contains(p) {
                    3
                } else {
                    0
                };
            }
        }
    }
    // Close the shell: every non-LV 6-neighbour of the LV is myocardium.
    let snapshot = labels.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if snapshot[idx(x, y, z)] == 1 {
                    continue;
                }
                let touches_lv = (x > 0 && snapshot[idx(x - 1, y, z)] == 1)
                    || (x + 1 < nx && snapshot[idx(x + 1, y, z)] == 1)
                    || (y > 0 && snapshot[idx(x, y - 1, z)] == 1)
                    || (y + 1 < ny && snapshot[idx(x, y + 1, z)] == 1)
                    || (z > 0 && snapshot[idx(x, y, z - 1)] == 1)
                    || (z + 1 < nz && snapshot[idx(x, y, z + 1)] == 1);
                if touches_lv {
                    labels[idx(x, y, z)] = 2;
                }
            }
        }
    }

    let mut clean = vec![0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = at(x, y, z);
                let i = idx(x, y, z);
                let v = match labels[i] {
                    1 => 1.0,
                    2 => 0.3,
                    3 => 0.85,
                    _ if body.contains(p) => {
                        let tex = (2.0 * std::f64::consts::PI * freq[0] * p[0] + freq[2]).sin()
                            * (2.0 * std::f64::consts::PI * freq[1] * p[1]).sin();
                        0.22 + 0.08 * tex
                    }
                    _ => 0.02,
                };
                clean[i] = ((v + 0.02 * noise.normal()) as f32) * INTENSITY_SCALE;
            }
        }
    }

    // Artifacts. Draws do not depend on the class.
    let u = art.uniform();
    let shift = ((ny as f64 * art.uniform_range(0.2, 0.3)).round() as usize).max(1);
    let copies = motion_class as usize;
    let amp = ghost_amplitude(motion_class, u);
    let mut ghosted = clean.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut g = 0.0f64;
                for j in 1..=copies {
                    let a = amp * 0.5f64.powi(j as i32 - 1) / 2.0;
                    let s = (j * shift) % ny;
                    g += a * clean[idx(x, (y + s) % ny, z)] as f64;
                    g += a * clean[idx(x, (y + ny - s) % ny, z)] as f64;
                }
                ghosted[idx(x, y, z)] += g as f32;
            }
        }
    }
    let image = blur_y(&ghosted, dims, blur_sigma(motion_class, u));

    let spacing = [FIELD_OF_VIEW[0] / nx as f64, FIELD_OF_VIEW[1] / ny as f64, FIELD_OF_VIEW[2] / nz as f64];
    let mut image = Volume::new(dims, spacing, image, Datatype::F32)?;
    image.descrip = format!("phantom class {motion_class}");
    let mask = Volume::new(dims, spacing, labels.iter().map(|&l| l as f32).collect(), Datatype::U8)?;
    Ok(Phantom { image, mask, clean })
}

/// Gaussian blur along y with clamped borders.
fn blur_y(v: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let mut out = vec![0f32; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (ki, k) in (-r..=r).enumerate() {
                    let yy = (y as isize + k).clamp(0, ny as isize - 1) as usize;
                    acc += kernel[ki] * v[(z * ny + yy) * nx + x] as f64;
                }
                out[(z * ny + y) * nx + x] = (acc / total) as f32;
            }
        }
    }
    out
}
