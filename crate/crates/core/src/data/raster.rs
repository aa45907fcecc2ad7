//! 8-bit images and binary masks, stored as PNG.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::{Error, Result};

/// `H×W×C` 8-bit image, `C ∈ {1, 3}`, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub id: String,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(id: impl Into<String>, height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(id, height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let at = (row * self.width + col) * self.channels;
        &self.pixels[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let at = (row * self.width + col) * self.channels;
        &mut self.pixels[at..at + self.channels]
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(g) => Self::new(id, h, w, 1, g.into_raw()),
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                Self::new(id, h, w, 1, img.to_luma8().into_raw())
            }
            other => Self::new(id, h, w, 3, other.to_rgb8().into_raw()),
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.pixels.clone()).expect("sized"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.pixels.clone()).expect("sized"))
        };
        let mut buf = Cursor::new(Vec::new());
        dynamic
            .write_to(&mut buf, ImageFormat::Png)
            .expect("in-memory PNG encode");
        buf.into_inner()
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_atomic(path.as_ref(), &self.encode_png())
    }
}

/// `H×W` binary mask. On disk: 8-bit gray PNG, 0 = off, 255 = on; any
/// value above 127 reads as on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
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

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Inclusive `(row0, col0, row1, col1)` box around all set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self {
            height: h,
            width: w,
            bits: img.into_raw().into_iter().map(|v| v > 127).collect(),
        })
    }

    pub fn to_image(&self) -> RasterImage {
        let pixels = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        RasterImage::new("mask", self.height, self.width, 1, pixels).expect("sized")
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write_png(path)
    }
}

/// `(height, width)` of a PNG without decoding its pixels.
pub fn png_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    image::image_dimensions(path)
        .map(|(w, h)| (h as usize, w as usize))
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
