use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::dataset::BBox;
use crate::error::{Error, Result};

/// Gray level at or above which a mask pixel counts as foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// A single-class foreground/background grid in row-major order.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("foreground", &self.count())
            .finish()
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::data(format!(
                "mask grid has {} cells, expected {width}x{height}",
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask { width, height, bits }
    }

    /// Mask whose foreground is the set of pixels with centers inside `bbox`.
    pub fn from_box(width: usize, height: usize, bbox: &BBox) -> Self {
        let mut mask = BinaryMask::empty(width, height);
        mask.fill_box(bbox);
        mask
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// True when no pixel is foreground.
    pub fn is_blank(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Marks every pixel whose center lies in the half-open box as foreground.
    pub fn fill_box(&mut self, bbox: &BBox) {
        let Some((xs, ys)) = bbox.pixel_span(self.width, self.height) else {
            return;
        };
        for y in ys {
            let row = y * self.width;
            for x in xs.clone() {
                self.bits[row + x] = true;
            }
        }
    }

    /// Pixelwise OR with another mask of the same size.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::data(format!(
                "cannot union {}x{} mask with {}x{} mask",
                self.width, self.height, other.width, other.height
            )));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Mirrors the mask left to right.
    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }
}

/// Thresholds an 8-bit single-channel image at [`MASK_THRESHOLD`].
pub fn binarize_mask(image: &DynamicImage) -> Result<BinaryMask> {
    match image {
        DynamicImage::ImageLuma8(gray) => Ok(binarize_gray(gray)),
        other => Err(Error::data(format!(
            "mask must be single-channel 8-bit, got {:?}",
            other.color()
        ))),
    }
}

pub(crate) fn binarize_gray(gray: &GrayImage) -> BinaryMask {
    BinaryMask {
        width: gray.width() as usize,
        height: gray.height() as usize,
        bits: gray.as_raw().iter().map(|v| *v >= MASK_THRESHOLD).collect(),
    }
}

/// Reads a mask file. Multi-channel masks are collapsed by per-pixel max
/// (with a warning) before thresholding.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let image = open_image(path)?;
    match image {
        DynamicImage::ImageLuma8(gray) => Ok(binarize_gray(&gray)),
        other => {
            log::warn!(
                "{}: {:?} mask collapsed to one channel by max",
                path.display(),
                other.color()
            );
            Ok(binarize_gray(&collapse_max(&other)))
        }
    }
}

fn collapse_max(image: &DynamicImage) -> GrayImage {
    let rgba = image.to_rgba8();
    GrayImage::from_fn(rgba.width(), rgba.height(), |x, y| {
        let p = rgba.get_pixel(x, y).0;
        Luma([p[0].max(p[1]).max(p[2])])
    })
}

pub(crate) fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a mask as an 8-bit PNG with foreground 255.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    mask.to_gray_image().save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
