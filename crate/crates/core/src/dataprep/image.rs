use crate::dataprep::mask::BinaryMask;
use crate::error::{shape_err, Result};

/// Paper-white: the background colour used for every out-of-frame fill.
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// 8-bit RGB, interleaved row-major (HWC).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(shape_err!("rgb image {height}x{width} needs {} bytes, got {}", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Self { height, width, data }
    }

    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(shape_err!("gray image {height}x{width} needs {} bytes, got {}", height * width, gray.len()));
        }
        Ok(Self { height, width, data: gray.iter().flat_map(|&v| [v, v, v]).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma per pixel, unrounded.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect()
    }
}

/// An image with its wall mask; the pair always shares dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(image: RgbImage, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(shape_err!("image {:?} and mask {:?} differ in size", image.dims(), mask.dims()));
        }
        Ok(Self { image, mask })
    }
}

/// Float sampling helpers shared by the warps.
pub(crate) fn sample_bilinear(img: &RgbImage, sy: f64, sx: f64) -> [u8; 3] {
    let (h, w) = (img.height as f64, img.width as f64);
    // Outside the half-pixel border we are fully in the background.
    if !(sy > -1.0 && sx > -1.0 && sy < h && sx < w) {
        return BACKGROUND;
    }
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let fetch = |y: f64, x: f64, c: usize| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h || x >= w {
            BACKGROUND[c] as f64
        } else {
            img.data[((y as usize) * img.width + x as usize) * 3 + c] as f64
        }
    };
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = fetch(y0, x0, c) * (1.0 - fx) + fetch(y0, x0 + 1.0, c) * fx;
        let bot = fetch(y0 + 1.0, x0, c) * (1.0 - fx) + fetch(y0 + 1.0, x0 + 1.0, c) * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub(crate) fn sample_nearest(mask: &BinaryMask, sy: f64, sx: f64) -> bool {
    let (y, x) = (sy.round(), sx.round());
    if !(y.is_finite() && x.is_finite()) {
        return false;
    }
    mask.at(y as isize, x as isize)
}

/// Apply one inverse coordinate map to both halves of a sample: bilinear for
/// the image, nearest for the mask.
pub(crate) fn warp(sample: &Sample, h: usize, w: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Sample {
    let mut image = RgbImage::filled(h, w, BACKGROUND);
    let mut mask = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inverse(y as f64, x as f64);
            image.put(y, x, sample_bilinear(&sample.image, sy, sx));
            mask.set(y, x, sample_nearest(&sample.mask, sy, sx));
        }
    }
    Sample { image, mask }
}
