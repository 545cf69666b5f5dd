use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// One bit per pixel, row-major; `true` is foreground (wall).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err!("mask {height}x{width} needs {} bits, got {}", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Signed lookup; anything outside the frame is background.
    pub fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.get(y as usize, x as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn invert(&self) -> Self {
        self.map(|b| !b)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    /// `self ∖ other`.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn map(&self, f: impl Fn(bool) -> bool) -> Self {
        Self { height: self.height, width: self.width, bits: self.bits.iter().map(|&b| f(b)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        check_same(self, other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, bits })
    }

    /// 0/255 bytes, as written to disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Threshold at mid-gray so lossy round trips stay binary.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&v| v >= 128).collect())
    }
}

pub(crate) fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("mask dimensions differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Sliding-window any/all along one axis via prefix counts. Out-of-frame
/// cells count as background, so `all` fails near the border.
fn sweep(src: &BinaryMask, r: usize, horizontal: bool, want_all: bool) -> BinaryMask {
    let (h, w) = src.dims();
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let mut out = BinaryMask::empty(h, w);
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        let idx = |k: usize| if horizontal { line * w + k } else { k * w + line };
        for k in 0..len {
            prefix[k + 1] = prefix[k] + src.bits[idx(k)] as usize;
        }
        for k in 0..len {
            let lo = k.saturating_sub(r);
            let hi = (k + r + 1).min(len);
            let n = prefix[hi] - prefix[lo];
            out.bits[idx(k)] = if want_all { n == 2 * r + 1 } else { n > 0 };
        }
    }
    out
}

/// Dilation by a (2r+1)-square structuring element.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    sweep(&sweep(mask, radius, true, false), radius, false, false)
}

/// Erosion by a (2r+1)-square structuring element with background padding.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    sweep(&sweep(mask, radius, true, true), radius, false, true)
}

fn odd_radius(kernel_side: usize) -> Result<usize> {
    if kernel_side % 2 == 0 {
        return Err(invalid!("structuring element side must be odd, got {kernel_side}"));
    }
    Ok(kernel_side / 2)
}

pub fn closing(mask: &BinaryMask, kernel_side: usize) -> Result<BinaryMask> {
    let r = odd_radius(kernel_side)?;
    Ok(erode(&dilate(mask, r), r))
}

pub fn opening(mask: &BinaryMask, kernel_side: usize) -> Result<BinaryMask> {
    let r = odd_radius(kernel_side)?;
    Ok(dilate(&erode(mask, r), r))
}

pub const REFINE_DILATE_PX: usize = 30;
pub const REFINE_CLOSE_KERNEL: usize = 5;

/// Wall minus a safety margin around every door and window, then closed to
/// heal small breaks.
pub fn refine_annotation(
    wall: &BinaryMask,
    doors: &BinaryMask,
    windows: &BinaryMask,
    dilate_px: usize,
    close_kernel: usize,
) -> Result<BinaryMask> {
    carve_openings(wall, doors, windows, dilate_px).and_then(|carved| closing(&carved, close_kernel))
}

/// The refinement up to (not including) the final closing.
pub fn carve_openings(wall: &BinaryMask, doors: &BinaryMask, windows: &BinaryMask, dilate_px: usize) -> Result<BinaryMask> {
    check_same(wall, doors)?;
    check_same(wall, windows)?;
    let openings = doors.union(windows)?;
    wall.subtract(&dilate(&openings, dilate_px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_stamps_square() {
        let mut m = BinaryMask::empty(7, 7);
        m.set(3, 3, true);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 9);
        assert!(d.get(2, 2) && d.get(4, 4) && !d.get(1, 3));
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn erosion_eats_the_frame_border() {
        let full = BinaryMask::from_fn(5, 5, |_, _| true);
        let e = erode(&full, 1);
        assert_eq!(e.count(), 9);
        assert!(!e.get(0, 2));
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(closing(&BinaryMask::empty(3, 3), 4).is_err());
    }
}
