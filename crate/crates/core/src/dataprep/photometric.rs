use rand_distr::{Distribution, Normal};

use crate::dataprep::image::RgbImage;
use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn finite(what: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} parameters {vals:?}")))
    }
}

/// `x·(1+Δc) + 255·Δb`, clamped.
pub fn brightness_contrast(img: &RgbImage, brightness: f64, contrast: f64) -> Result<RgbImage> {
    finite("brightness/contrast", &[brightness, contrast])?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = clamp_u8(*v as f64 * (1.0 + contrast) + 255.0 * brightness);
    }
    Ok(out)
}

/// Tile lookup tables: clipped histogram, excess spread evenly, then the
/// cumulative distribution scaled to 0..255.
fn tile_lut(values: impl Iterator<Item = u8>, clip_limit: f64) -> [f64; 256] {
    let mut hist = [0usize; 256];
    let mut n = 0usize;
    for v in values {
        hist[v as usize] += 1;
        n += 1;
    }
    let clip = ((clip_limit * n as f64 / 256.0) as usize).max(1);
    let mut excess = 0;
    for c in hist.iter_mut() {
        if *c > clip {
            excess += *c - clip;
            *c = clip;
        }
    }
    let (each, rest) = (excess / 256, excess % 256);
    let mut lut = [0.0; 256];
    let mut acc = 0usize;
    for (i, c) in hist.iter().enumerate() {
        acc += c + each + (i < rest) as usize;
        lut[i] = acc as f64 * 255.0 / n.max(1) as f64;
    }
    lut
}

/// Contrast-limited adaptive histogram equalisation on luma. Each pixel
/// blends the four surrounding tile mappings bilinearly; the luma change is
/// added equally to R, G and B so chroma is kept.
pub fn clahe(img: &RgbImage, clip_limit: f64, tiles: usize) -> Result<RgbImage> {
    finite("clahe", &[clip_limit])?;
    if clip_limit <= 0.0 || tiles == 0 {
        return Err(invalid!("clahe needs clip_limit > 0 and tiles >= 1"));
    }
    let (h, w) = img.dims();
    let (ty, tx) = (tiles.min(h), tiles.min(w));
    let luma: Vec<u8> = img.luma().into_iter().map(|v| clamp_u8(v as f64)).collect();
    let bounds = |n: usize, t: usize, i: usize| (i * n / t, (i + 1) * n / t);
    let mut luts = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        let (y0, y1) = bounds(h, ty, i);
        for j in 0..tx {
            let (x0, x1) = bounds(w, tx, j);
            luts.push(tile_lut((y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| luma[y * w + x]), clip_limit));
        }
    }
    // Position of a pixel in tile-centre coordinates along one axis.
    let locate = |p: usize, n: usize, t: usize| -> (usize, usize, f64) {
        let c = (p as f64 + 0.5) * t as f64 / n as f64 - 0.5;
        if c <= 0.0 {
            (0, 0, 0.0)
        } else if c >= (t - 1) as f64 {
            (t - 1, t - 1, 0.0)
        } else {
            let a = c.floor() as usize;
            (a, a + 1, c - a as f64)
        }
    };
    let mut out = img.clone();
    for y in 0..h {
        let (a, b, fy) = locate(y, h, ty);
        for x in 0..w {
            let (c, d, fx) = locate(x, w, tx);
            let l = luma[y * w + x] as usize;
            let top = luts[a * tx + c][l] * (1.0 - fx) + luts[a * tx + d][l] * fx;
            let bot = luts[b * tx + c][l] * (1.0 - fx) + luts[b * tx + d][l] * fx;
            let delta = top * (1.0 - fy) + bot * fy - l as f64;
            let p = img.pixel(y, x);
            out.put(y, x, p.map(|v| clamp_u8(v as f64 + delta)));
        }
    }
    Ok(out)
}

/// Independent N(0, σ²) per channel sample, on the 8-bit scale.
pub fn gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    finite("gaussian noise", &[sigma])?;
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid!("gaussian noise sigma {sigma}: {e}"))?;
    let mut rng = seed::rng(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = clamp_u8(*v as f64 + normal.sample(&mut rng));
    }
    Ok(out)
}

/// Sensor-style noise: a per-pixel luminance jitter (std `intensity`·32)
/// shared by all channels, plus per-channel colour jitter (std
/// `color_shift`·255).
pub fn iso_noise(img: &RgbImage, color_shift: f64, intensity: f64, seed: u64) -> Result<RgbImage> {
    finite("iso noise", &[color_shift, intensity])?;
    if color_shift < 0.0 || intensity < 0.0 {
        return Err(invalid!("iso noise strengths must be non-negative"));
    }
    let lum = Normal::new(0.0, intensity * 32.0).map_err(|e| invalid!("{e}"))?;
    let col = Normal::new(0.0, color_shift * 255.0).map_err(|e| invalid!("{e}"))?;
    let mut rng = seed::rng(seed);
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let l = lum.sample(&mut rng);
        for v in px {
            *v = clamp_u8(*v as f64 + l + col.sample(&mut rng));
        }
    }
    Ok(out)
}

/// HWC bytes -> CHW floats, `(x/255 − μ_c)/σ_c`, RGB order.
pub fn normalize(img: &RgbImage) -> Tensor<f32> {
    normalize_with(img, &IMAGENET_MEAN, &IMAGENET_STD)
}

pub fn normalize_with(img: &RgbImage, mean: &[f64; 3], std: &[f64; 3]) -> Tensor<f32> {
    let (h, w) = img.dims();
    let mut out = vec![0f32; 3 * h * w];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = ((px[c] as f64 / 255.0 - mean[c]) / std[c]) as f32;
        }
    }
    Tensor::new(&[3, h, w], out).expect("shape matches by construction")
}

pub fn denormalize(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(crate::error::shape_err!("denormalize expects [3, H, W], got {:?}", t.shape()));
    };
    let d = t.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            bytes[i * 3 + c] = clamp_u8((d[c * h * w + i] as f64 * IMAGENET_STD[c] + IMAGENET_MEAN[c]) * 255.0);
        }
    }
    RgbImage::new(h, w, bytes)
}
