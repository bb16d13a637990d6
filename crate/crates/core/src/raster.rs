//! Single-channel rasters and their on-disk forms.
//!
//! Intensities are normalized reals in `[0, 1]`; 8-bit sources are divided by
//! 255 and 16-bit sources by 65535. Masks are binarized at `> 127` on the
//! 8-bit scale. PNG and binary PGM (P5) are supported for both reading and
//! writing; writes are always 8-bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::contract(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::contract(format!("pixel {i} has intensity {v}, outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// `(min, max)` over all pixels, or `None` for an empty raster.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.pixels.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Quantizes to 8 bits, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub(crate) fn ensure_same_dims(&self, other: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != other {
            return Err(Error::contract(format!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.width, self.height, other.0, other.1
            )));
        }
        Ok(())
    }
}

/// Row-major binary raster; `true` marks a target pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl TargetMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width.checked_mul(height) != Some(bits.len()) {
            return Err(Error::contract(format!(
                "{}x{} mask needs {} bits, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { width, height, bits }
    }

    /// Binarizes a score map: a pixel is set when its intensity is strictly
    /// above `threshold`.
    pub fn from_threshold(image: &GrayImage, threshold: f64) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            bits: image.pixels().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub(crate) fn ensure_same_dims(&self, other: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != other {
            return Err(Error::contract(format!(
                "{what}: mask is {}x{}, image is {}x{}",
                self.width, self.height, other.0, other.1
            )));
        }
        Ok(())
    }
}

/// An image together with its target mask; construction rejects mismatched
/// dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    image: GrayImage,
    mask: TargetMask,
}

impl LabeledImage {
    pub fn new(image: GrayImage, mask: TargetMask) -> Result<Self> {
        mask.ensure_same_dims(image.dims(), "labeled image")?;
        Ok(Self { image, mask })
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn mask(&self) -> &TargetMask {
        &self.mask
    }

    pub fn into_parts(self) -> (GrayImage, TargetMask) {
        (self.image, self.mask)
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Format(format!("{}: zero-dimension raster", path.display())));
    }
    Ok(img)
}

fn is_16_bit(color: ColorType) -> bool {
    matches!(
        color,
        ColorType::L16
            | ColorType::La16
            | ColorType::Rgb16
            | ColorType::Rgba16
            | ColorType::Rgb32F
            | ColorType::Rgba32F
    )
}

/// Loads a PNG or PGM as normalized intensities. Multi-channel inputs are
/// reduced to luma.
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if is_16_bit(img.color()) {
        let luma = img.to_luma16();
        GrayImage::new(w, h, luma.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect())
    } else {
        let luma = img.to_luma8();
        GrayImage::from_u8(w, h, luma.as_raw())
    }
}

/// Loads a mask file; a pixel is a target when its 8-bit value is > 127.
pub fn load_mask(path: impl AsRef<Path>) -> Result<TargetMask> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma = img.to_luma8();
    TargetMask::new(w, h, luma.as_raw().iter().map(|&v| v > 127).collect())
}

pub fn load_labeled(image: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<LabeledImage> {
    LabeledImage::new(load_gray_image(image)?, load_mask(mask)?)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") => Ok(ImageFormat::Pnm),
        other => Err(Error::Format(format!(
            "{}: unsupported output extension {other:?} (expected png or pgm)",
            path.display()
        ))),
    }
}

fn encode_l8(bytes: &[u8], width: usize, height: usize, format: ImageFormat) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (w, h) = (width as u32, height as u32);
    let res = match format {
        ImageFormat::Png => {
            image::codecs::png::PngEncoder::new(&mut out).write_image(bytes, w, h, ExtendedColorType::L8)
        }
        _ => PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(bytes, w, h, ExtendedColorType::L8),
    };
    res.map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

/// Encodes the image as an 8-bit PNG in memory.
pub fn encode_png(image: &GrayImage) -> Result<Vec<u8>> {
    encode_l8(&image.to_u8(), image.width(), image.height(), ImageFormat::Png)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit PNG or PGM depending on the extension of `path`.
pub fn save_gray_image(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_l8(&image.to_u8(), image.width(), image.height(), format_for(path)?)?;
    write_bytes(path, &bytes)
}

/// Writes a mask as 0/255.
pub fn save_mask(mask: &TargetMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_l8(&mask.to_u8(), mask.width(), mask.height(), format_for(path)?)?;
    write_bytes(path, &bytes)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
