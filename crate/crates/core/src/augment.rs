//! Paired image/target augmentation.
//!
//! Geometric transforms (rotation, scaling, elastic warp) are composed into a
//! single inverse map applied to both rasters: bilinear for the image,
//! nearest-neighbour for the target. Blur and color jitter touch the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Counter-clockwise rotation range in degrees.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub blur_sigma: [f64; 2],
    /// Relative brightness amplitude; factors are drawn from `1 ± brightness`.
    pub brightness: f64,
    pub saturation: f64,
    /// Spacing of the elastic control grid in pixels.
    pub elastic_grid: f64,
    /// Standard deviation of control-point displacements in pixels.
    pub elastic_sigma: f64,
    /// Probability that each transform is applied.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: [-180.0, 180.0],
            scale: [0.9, 1.1],
            blur_sigma: [0.0, 1.5],
            brightness: 0.1,
            saturation: 0.1,
            elastic_grid: 64.0,
            elastic_sigma: 2.0,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self { probability: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rotation_deg[0],
            self.rotation_deg[1],
            self.scale[0],
            self.scale[1],
            self.blur_sigma[0],
            self.blur_sigma[1],
            self.brightness,
            self.saturation,
            self.elastic_grid,
            self.elastic_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("augment", "all ranges must be finite"));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::validation("augment.probability", format!("must be in [0,1], got {}", self.probability)));
        }
        if self.rotation_deg[0] > self.rotation_deg[1] || self.scale[0] > self.scale[1] || self.blur_sigma[0] > self.blur_sigma[1] {
            return Err(Error::validation("augment", "range minimum exceeds maximum"));
        }
        if self.scale[0] <= 0.0 || self.blur_sigma[0] < 0.0 || self.elastic_grid <= 0.0 || self.elastic_sigma < 0.0 {
            return Err(Error::validation("augment", "scale, grid spacing must be positive; sigmas non-negative"));
        }
        if self.brightness < 0.0 || self.brightness >= 1.0 || self.saturation < 0.0 {
            return Err(Error::validation("augment", "jitter amplitudes must be in [0,1)"));
        }
        Ok(())
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Snaps values within 1e-12 of an integer so quarter turns map pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

/// Smooth divergence-free displacement field: the curl of a cubic B-spline
/// stream function with control points every `spacing` pixels. A zero
/// divergence keeps local areas unchanged to first order.
struct Elastic {
    nodes: usize,
    spacing: f64,
    coef: Vec<f64>,
    gain: f64,
}

fn bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

fn bspline_deriv(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        -2.0 * t + 1.5 * t * a
    } else if a < 2.0 {
        -t.signum() * (2.0 - a).powi(2) / 2.0
    } else {
        0.0
    }
}

impl Elastic {
    fn sample(size: usize, spacing: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        // control points -1..=m+1 cover every pixel with full B-spline support
        let nodes = (size as f64 / spacing).ceil() as usize + 3;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let coef = (0..nodes * nodes).map(|_| normal.sample(rng)).collect();
        let mut field = Self { nodes, spacing, coef, gain: 1.0 };
        let mut sq = 0.0;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = field.at(x as f64 + 0.5, y as f64 + 0.5);
                sq += u * u + v * v;
            }
        }
        let rms = (sq / (2 * size * size) as f64).sqrt();
        field.gain = if rms > 0.0 { sigma / rms } else { 0.0 };
        field
    }

    /// Displacement `(∂ψ/∂y, −∂ψ/∂x)` at pixel coordinates `(x, y)`.
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let (gx, gy) = (x / self.spacing + 1.0, y / self.spacing + 1.0);
        let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
        let (mut dpsi_dx, mut dpsi_dy) = (0.0, 0.0);
        for j in iy - 1..=iy + 2 {
            for i in ix - 1..=ix + 2 {
                if i < 0 || j < 0 || i as usize >= self.nodes || j as usize >= self.nodes {
                    continue;
                }
                let c = self.coef[j as usize * self.nodes + i as usize];
                let (tx, ty) = (gx - i as f64, gy - j as f64);
                dpsi_dx += c * bspline_deriv(tx) * bspline(ty);
                dpsi_dy += c * bspline(tx) * bspline_deriv(ty);
            }
        }
        (self.gain * dpsi_dy, -self.gain * dpsi_dx)
    }
}

fn warp(image: &[u8], target: &[u8], size: usize, angle_deg: f64, scale: f64, elastic: Option<&Elastic>) -> (Vec<u8>, Vec<u8>) {
    let theta = angle_deg.to_radians();
    let (cos, sin) = (snap(theta.cos()), snap(theta.sin()));
    let c = size as f64 / 2.0;
    let mut out_img = vec![0u8; image.len()];
    let mut out_tgt = vec![0u8; target.len()];
    for y in 0..size {
        for x in 0..size {
            let (mut dx, mut dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            if let Some(e) = elastic {
                let (ex, ey) = e.at(x as f64 + 0.5, y as f64 + 0.5);
                dx += ex;
                dy += ey;
            }
            // inverse of a visual counter-clockwise rotation (y axis points down)
            let sx = (dx * cos - dy * sin) / scale + c - 0.5;
            let sy = (dx * sin + dy * cos) / scale + c - 0.5;
            let o = y * size + x;

            let (nx, ny) = (reflect(sx.round() as i64, size), reflect(sy.round() as i64, size));
            out_tgt[o] = target[ny * size + nx];

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let xs = [reflect(x0, size), reflect(x0 + 1, size)];
            let ys = [reflect(y0, size), reflect(y0 + 1, size)];
            for ch in 0..3 {
                let p = |xx: usize, yy: usize| image[(yy * size + xx) * 3 + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(xs[0], ys[0]) + fx * p(xs[1], ys[0]))
                    + fy * ((1.0 - fx) * p(xs[0], ys[1]) + fx * p(xs[1], ys[1]));
                out_img[o * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (out_img, out_tgt)
}

fn gaussian_blur(image: &mut [u8], size: usize, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                tmp[(y * size + x) * 3 + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * src[(y * size + reflect(x as i64 + k as i64 - radius, size)) * 3 + ch])
                    .sum();
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[(reflect(y as i64 + k as i64 - radius, size) * size + x) * 3 + ch])
                    .sum();
                image[(y * size + x) * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

fn color_jitter(image: &mut [u8], brightness: f64, saturation: f64) {
    for px in image.chunks_exact_mut(3) {
        let gray = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
        for v in px.iter_mut() {
            let s = gray + saturation * (*v as f64 - gray);
            *v = (s * brightness).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Applies a seeded random augmentation to a `size × size` RGB patch
/// (interleaved) and its label raster.
pub fn augment(image: &[u8], target: &[u8], size: usize, cfg: &AugmentConfig, seed: u64) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(image.len(), size * size * 3, "image size mismatch");
    assert_eq!(target.len(), size * size, "target size mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.probability;
    let apply = |rng: &mut ChaCha8Rng| p > 0.0 && rng.random_bool(p);

    let angle = if apply(&mut rng) { rng.random_range(cfg.rotation_deg[0]..=cfg.rotation_deg[1]) } else { 0.0 };
    let scale = if apply(&mut rng) { rng.random_range(cfg.scale[0]..=cfg.scale[1]) } else { 1.0 };
    let elastic = if apply(&mut rng) && cfg.elastic_sigma > 0.0 {
        Some(Elastic::sample(size, cfg.elastic_grid, cfg.elastic_sigma, &mut rng))
    } else {
        None
    };
    let blur = if apply(&mut rng) { rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]) } else { 0.0 };
    let jitter = if apply(&mut rng) {
        Some((
            1.0 + rng.random_range(-cfg.brightness..=cfg.brightness),
            1.0 + rng.random_range(-cfg.saturation..=cfg.saturation),
        ))
    } else {
        None
    };

    let (mut img, tgt) = if angle != 0.0 || scale != 1.0 || elastic.is_some() {
        warp(image, target, size, angle, scale, elastic.as_ref())
    } else {
        (image.to_vec(), target.to_vec())
    };
    gaussian_blur(&mut img, size, blur);
    if let Some((b, s)) = jitter {
        color_jitter(&mut img, b, s);
    }
    (img, tgt)
}
