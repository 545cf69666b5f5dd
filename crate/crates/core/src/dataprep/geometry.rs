use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::image::{warp, RgbImage, Sample, BACKGROUND};
use crate::dataprep::mask::BinaryMask;
use crate::error::{invalid, Error, Result};
use crate::seed;

fn finite(what: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} parameters {vals:?}")))
    }
}

/// Pad a non-square sample to a centred square; image padding is paper
/// white, mask padding background.
pub fn letterbox(sample: &Sample) -> Sample {
    let (h, w) = sample.image.dims();
    let side = h.max(w);
    if h == w {
        return sample.clone();
    }
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    let mut image = RgbImage::filled(side, side, BACKGROUND);
    let mut mask = BinaryMask::empty(side, side);
    for y in 0..h {
        for x in 0..w {
            image.put(y + oy, x + ox, sample.image.pixel(y, x));
            mask.set(y + oy, x + ox, sample.mask.get(y, x));
        }
    }
    Sample { image, mask }
}

/// Half-pixel-centre resize; source coordinates are clamped to the frame so
/// borders never pick up fill colour.
pub fn resize(sample: &Sample, h: usize, w: usize) -> Result<Sample> {
    let (sh, sw) = sample.image.dims();
    if h == 0 || w == 0 {
        return Err(invalid!("resize target must be non-empty"));
    }
    if (sh, sw) == (h, w) {
        return Ok(sample.clone());
    }
    let (ky, kx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    Ok(warp(sample, h, w, |y, x| {
        (((y + 0.5) * ky - 0.5).clamp(0.0, (sh - 1) as f64), ((x + 0.5) * kx - 0.5).clamp(0.0, (sw - 1) as f64))
    }))
}

/// Letterbox to square, then resize to `side`×`side`.
pub fn resize_to_training(sample: &Sample, side: usize) -> Result<Sample> {
    resize(&letterbox(sample), side, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    /// Degrees, counter-clockwise as displayed.
    pub angle_deg: f64,
    /// Pixels, +x right, +y down.
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { scale: 1.0, angle_deg: 0.0, tx: 0.0, ty: 0.0 };

    /// Where the forward map sends pixel centre (y, x) of an h×w frame.
    pub fn forward(&self, h: usize, w: usize, y: f64, x: f64) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (y - cy, x - cx);
        // y grows downward, so a visual counter-clockwise turn is
        // (dx, dy) -> (dx cos + dy sin, −dx sin + dy cos).
        let nx = self.scale * (dx * c + dy * s);
        let ny = self.scale * (-dx * s + dy * c);
        (cy + ny + self.ty, cx + nx + self.tx)
    }

    fn inverse(&self, h: usize, w: usize, y: f64, x: f64) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = ((y - self.ty - cy) / self.scale, (x - self.tx - cx) / self.scale);
        (cy + dx * s + dy * c, cx + dx * c - dy * s)
    }
}

pub fn affine(sample: &Sample, p: &AffineParams) -> Result<Sample> {
    finite("affine", &[p.scale, p.angle_deg, p.tx, p.ty])?;
    if p.scale <= 0.0 {
        return Err(invalid!("affine scale must be positive, got {}", p.scale));
    }
    if *p == AffineParams::IDENTITY {
        return Ok(sample.clone());
    }
    let (h, w) = sample.image.dims();
    Ok(warp(sample, h, w, |y, x| p.inverse(h, w, y, x)))
}

/// Displacements (dx, dy) in pixels for the TL, TR, BR, BL corners.
pub type CornerJitter = [[f64; 2]; 4];

/// Solve the 8-dof homography sending `from[i]` to `to[i]` (x, y pairs).
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Result<[f64; 9]> {
    let mut a = [[0f64; 9]; 8];
    for i in 0..4 {
        let ([x, y], [u, v]) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(invalid!("degenerate perspective corners"));
        }
        a.swap(col, piv);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..9 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    Ok(h)
}

pub fn perspective(sample: &Sample, jitter: &CornerJitter) -> Result<Sample> {
    finite("perspective", jitter.as_flattened())?;
    if jitter.iter().flatten().all(|&v| v == 0.0) {
        return Ok(sample.clone());
    }
    let (h, w) = sample.image.dims();
    let (r, b) = (w as f64 - 1.0, h as f64 - 1.0);
    let corners = [[0.0, 0.0], [r, 0.0], [r, b], [0.0, b]];
    let moved: [[f64; 2]; 4] = std::array::from_fn(|i| [corners[i][0] + jitter[i][0], corners[i][1] + jitter[i][1]]);
    // Output pixels look up their source, so solve moved -> original.
    let m = homography(&moved, &corners)?;
    Ok(warp(sample, h, w, |y, x| {
        let d = m[6] * x + m[7] * y + m[8];
        ((m[3] * x + m[4] * y + m[5]) / d, (m[0] * x + m[1] * y + m[2]) / d)
    }))
}

/// Separable Gaussian blur with clamped edges, radius ⌈3σ⌉.
pub(crate) fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                    };
                    acc += kv * src[yy * w + xx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Smoothed random displacement: uniform noise blurred by `sigma`, rescaled
/// so its largest component is `alpha` pixels.
pub fn elastic(sample: &Sample, alpha: f64, sigma: f64, seed: u64) -> Result<Sample> {
    finite("elastic", &[alpha, sigma])?;
    if alpha < 0.0 || sigma < 0.0 {
        return Err(invalid!("elastic alpha and sigma must be non-negative"));
    }
    if alpha == 0.0 {
        return Ok(sample.clone());
    }
    let (h, w) = sample.image.dims();
    let mut rng = seed::rng(seed);
    let mut field = || {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let blurred = gaussian_blur(&raw, h, w, sigma);
        let peak = blurred.iter().fold(0f64, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { alpha / peak } else { 0.0 };
        blurred.into_iter().map(|v| v * k).collect::<Vec<_>>()
    };
    let (dx, dy) = (field(), field());
    Ok(warp(sample, h, w, |y, x| {
        let i = y as usize * w + x as usize;
        (y + dy[i], x + dx[i])
    }))
}

/// Piecewise-linear source positions for one axis of the grid warp.
fn grid_axis(len: usize, cells: usize, magnitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let span = len as f64 - 1.0;
    let step = span / cells as f64;
    let knots: Vec<f64> = (0..=cells)
        .map(|k| {
            let base = k as f64 * step;
            if k == 0 || k == cells {
                base
            } else {
                base + rng.random_range(-1.0..=1.0) * magnitude * step
            }
        })
        .collect();
    (0..len)
        .map(|i| {
            let t = i as f64 / step;
            let k = (t.floor() as usize).min(cells - 1);
            let f = t - k as f64;
            knots[k] * (1.0 - f) + knots[k + 1] * f
        })
        .collect()
}

/// Grid distortion: interior grid lines jitter by up to `magnitude` of a
/// cell; everything between lines is linearly stretched.
pub fn grid_distort(sample: &Sample, cells: usize, magnitude: f64, seed: u64) -> Result<Sample> {
    finite("grid", &[magnitude])?;
    if cells == 0 || !(0.0..0.5).contains(&magnitude) {
        return Err(invalid!("grid distortion needs cells >= 1 and magnitude in [0, 0.5), got {cells}, {magnitude}"));
    }
    let (h, w) = sample.image.dims();
    if magnitude == 0.0 || h < 2 || w < 2 {
        return Ok(sample.clone());
    }
    let mut rng = seed::rng(seed);
    let xs = grid_axis(w, cells, magnitude, &mut rng);
    let ys = grid_axis(h, cells, magnitude, &mut rng);
    Ok(warp(sample, h, w, |y, x| (ys[y as usize], xs[x as usize])))
}
