//! Images and masks on disk. `.png` goes through the `image` crate; `.pgm`,
//! `.ppm` and `.pnm` use the binary netpbm reader/writer below, which needs
//! no codec at all.

use std::path::Path;

use crate::dataprep::image::{RgbImage, Sample};
use crate::dataprep::mask::BinaryMask;
use crate::error::{Error, Result};

fn is_pnm(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm"))
}

fn codec(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Parsed netpbm raster: (height, width, channels, bytes).
type Pnm = (usize, usize, usize, Vec<u8>);

pub fn encode_pnm(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Vec<u8> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn decode_pnm(raw: &[u8]) -> Result<Pnm> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Data(format!("unsupported netpbm magic {m:?} (binary P5/P6 only)"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad netpbm number {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Data(format!("only 8-bit netpbm is supported, maxval {maxval}")));
    }
    let body = &raw[(pos + 1).min(raw.len())..];
    let need = width * height * channels;
    if body.len() < need {
        return Err(Error::Data(format!("netpbm body has {} bytes, expected {need}", body.len())));
    }
    Ok((height, width, channels, body[..need].to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if is_pnm(path) {
        let (h, w, c, bytes) = decode_pnm(&read(path)?)?;
        return if c == 3 { RgbImage::new(h, w, bytes) } else { RgbImage::from_gray(h, w, &bytes) };
    }
    let img = image::open(path).map_err(|e| codec(path, e))?.to_rgb8();
    RgbImage::new(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    if is_pnm(path) {
        return write(path, &encode_pnm(img.height(), img.width(), 3, img.data()));
    }
    image::save_buffer(path, img.data(), img.width() as u32, img.height() as u32, image::ColorType::Rgb8)
        .map_err(|e| codec(path, e))
}

/// Any image; non-zero-ish (≥128 luma) pixels are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    if is_pnm(path) {
        let (h, w, c, bytes) = decode_pnm(&read(path)?)?;
        let gray: Vec<u8> = if c == 1 { bytes } else { bytes.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect() };
        return BinaryMask::from_bytes(h, w, &gray);
    }
    let img = image::open(path).map_err(|e| codec(path, e))?.to_luma8();
    BinaryMask::from_bytes(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Single-channel 8-bit, 0 background / 255 wall.
pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask.to_bytes();
    if is_pnm(path) {
        return write(path, &encode_pnm(mask.height(), mask.width(), 1, &bytes));
    }
    image::save_buffer(path, &bytes, mask.width() as u32, mask.height() as u32, image::ColorType::L8)
        .map_err(|e| codec(path, e))
}

/// PNG bytes in memory (used for hashing plots and for the browser demo).
pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| codec(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm" | "ppm" | "pnm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs `dir/images/X` with `dir/masks/X` (same file stem), sorted by name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let images = image_files(&dir.join("images"))?;
    let masks = image_files(&dir.join("masks"))?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_os_string());
    if images.len() != masks.len() || images.iter().zip(&masks).any(|(a, b)| stem(a) != stem(b)) {
        return Err(Error::Data(format!(
            "{}: images/ and masks/ do not pair up by file name ({} vs {} files)",
            dir.display(),
            images.len(),
            masks.len()
        )));
    }
    images.iter().zip(&masks).map(|(i, m)| Sample::new(load_rgb(i)?, load_mask(m)?)).collect()
}
