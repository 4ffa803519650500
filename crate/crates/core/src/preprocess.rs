//! Geometric and photometric preparation of images for model graphs.
//!
//! Every resize is described by a [`LetterboxTransform`] so that boxes can be
//! moved between original-image coordinates and model-input coordinates in
//! both directions.

use fast_image_resize::{FilterType, ResizeAlg, ResizeOptions, Resizer};
use image::imageops;
use image::{DynamicImage, Rgb, RgbImage};
use ndarray::{Array3, Array4, ArrayViewMut3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, BinaryMask};
use crate::error::{Error, Result};

/// Conventional detector letterbox fill.
pub const DEFAULT_PAD_FILL: u8 = 114;

/// Where the resized content sits inside the square model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Symmetric padding (detector letterbox).
    Center,
    /// Padding on the bottom and right only (segmenter encoder input).
    TopLeft,
}

/// Aspect-preserving scale plus padding from an `src_w x src_h` image into a
/// `dst x dst` square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: usize,
    pub src_h: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl LetterboxTransform {
    pub fn new(src_w: usize, src_h: usize, dst: usize, placement: Placement) -> Result<Self> {
        if src_w == 0 || src_h == 0 {
            return Err(Error::data(format!("zero-sized image {src_w}x{src_h}")));
        }
        if dst == 0 {
            return Err(Error::config("letterbox target size must be positive"));
        }
        let scale = dst as f64 / src_w.max(src_h) as f64;
        let (pad_x, pad_y) = match placement {
            Placement::Center => (
                ((dst as f64 - scale * src_w as f64) / 2.0).floor().max(0.0),
                ((dst as f64 - scale * src_h as f64) / 2.0).floor().max(0.0),
            ),
            Placement::TopLeft => (0.0, 0.0),
        };
        Ok(LetterboxTransform {
            scale,
            pad_x,
            pad_y,
            src_w,
            src_h,
            dst,
        })
    }

    pub fn identity(width: usize, height: usize) -> Self {
        LetterboxTransform {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            src_w: width,
            src_h: height,
            dst: width.max(height),
        }
    }

    /// Size of the scaled image content before padding.
    pub fn content_size(&self) -> (usize, usize) {
        let scaled = |v: usize| ((v as f64 * self.scale).round() as usize).clamp(1, self.dst);
        (scaled(self.src_w), scaled(self.src_h))
    }

    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Maps a box between original and model-input coordinates. The inverse
/// direction clips to the source image and fails if nothing remains.
pub fn map_box(bbox: &BBox, t: &LetterboxTransform, direction: Direction) -> Result<BBox> {
    match direction {
        Direction::Forward => {
            let (x0, y0) = t.forward(bbox.x0, bbox.y0);
            let (x1, y1) = t.forward(bbox.x1, bbox.y1);
            BBox::new(x0, y0, x1, y1)
        }
        Direction::Inverse => {
            let (x0, y0) = t.inverse(bbox.x0, bbox.y0);
            let (x1, y1) = t.inverse(bbox.x1, bbox.y1);
            let clipped = BBox { x0, y0, x1, y1 }.clip(t.src_w as f64, t.src_h as f64);
            BBox::new(clipped.x0, clipped.y0, clipped.x1, clipped.y1)
                .map_err(|_| Error::data(format!("box outside image: {bbox:?}")))
        }
    }
}

/// Bilinear aspect-preserving resize into a centered `dst x dst` canvas
/// filled with gray level `fill`.
pub fn letterbox(image: &DynamicImage, dst: usize, fill: u8) -> Result<(RgbImage, LetterboxTransform)> {
    let t = LetterboxTransform::new(image.width() as usize, image.height() as usize, dst, Placement::Center)?;
    Ok((place(image, &t, fill), t))
}

fn resize_bilinear(rgb: &RgbImage, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w as u32, h as u32);
    let options = ResizeOptions::new().resize_alg(ResizeAlg::Convolution(FilterType::Bilinear));
    Resizer::new()
        .resize(rgb, &mut out, &options)
        .expect("both images are RGB8 and non-empty");
    out
}

fn place(image: &DynamicImage, t: &LetterboxTransform, fill: u8) -> RgbImage {
    let (w, h) = t.content_size();
    let rgb = image.to_rgb8();
    let resized = if (w, h) == (t.src_w, t.src_h) {
        rgb
    } else {
        resize_bilinear(&rgb, w, h)
    };
    if (w, h) == (t.dst, t.dst) {
        return resized;
    }
    let mut canvas = RgbImage::from_pixel(t.dst as u32, t.dst as u32, Rgb([fill; 3]));
    imageops::replace(&mut canvas, &resized, t.pad_x as i64, t.pad_y as i64);
    canvas
}

/// Per-channel affine normalization applied after optional scaling to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale_to_unit: bool,
}

impl NormalizationSpec {
    /// Pixel / 255 with no further shift (typical detector export).
    pub fn unit() -> Self {
        NormalizationSpec {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
            scale_to_unit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != 3 || self.std.len() != 3 {
            return Err(Error::contract(format!(
                "normalization needs 3 means and 3 stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::contract(format!(
                "normalization std must be positive: {:?}",
                self.std
            )));
        }
        Ok(())
    }

    /// Normalized value of raw pixel level `v` in channel `c`.
    pub fn apply(&self, v: f64, c: usize) -> f64 {
        let v = if self.scale_to_unit { v / 255.0 } else { v };
        (v - self.mean[c]) / self.std[c]
    }
}

/// Channel-first normalized tensor (`3 x H x W`). Gray images are replicated
/// to three channels first.
pub fn normalize(image: &DynamicImage, spec: &NormalizationSpec) -> Result<Array3<f32>> {
    spec.validate()?;
    if image.color().has_alpha() || !matches!(image.color().channel_count(), 1 | 3) {
        return Err(Error::data(format!("cannot normalize {:?} image", image.color())));
    }
    let rgb = image.to_rgb8();
    Ok(normalize_rgb(&rgb, spec))
}

fn normalize_rgb(rgb: &RgbImage, spec: &NormalizationSpec) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((3, rgb.height() as usize, rgb.width() as usize));
    normalize_into(rgb, spec, out.view_mut());
    out
}

/// Writes the normalized pixels of `rgb` into the top-left corner of `out`.
fn normalize_into(rgb: &RgbImage, spec: &NormalizationSpec, mut out: ArrayViewMut3<'_, f32>) {
    // one lookup table per channel
    let lut: Vec<Vec<f32>> = (0..3)
        .map(|c| (0..=255u8).map(|v| spec.apply(v as f64, c) as f32).collect())
        .collect();
    let w = rgb.width() as usize;
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        for (y, row) in rgb.rows().enumerate() {
            let dst = plane.row_mut(y);
            for (d, p) in dst.into_iter().take(w).zip(row) {
                *d = lut[c][p.0[c] as usize];
            }
        }
    }
}

/// Preprocessing contract for one model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub input_size: usize,
    pub normalization: NormalizationSpec,
    #[serde(default = "default_pad_fill")]
    pub pad_fill: u8,
}

fn default_pad_fill() -> u8 {
    DEFAULT_PAD_FILL
}

/// Detector input: centered letterbox with `pad_fill`, then normalization.
/// Returns a `1 x 3 x S x S` tensor.
pub fn detector_input(image: &DynamicImage, pre: &Preprocessing) -> Result<(Array4<f32>, LetterboxTransform)> {
    pre.normalization.validate()?;
    let (boxed, t) = letterbox(image, pre.input_size, pre.pad_fill)?;
    Ok((normalize_rgb(&boxed, &pre.normalization).insert_axis(Axis(0)), t))
}

/// Segmenter encoder input: longest side scaled to `input_size`, normalized,
/// then zero-padded on the bottom and right (zero in normalized space).
pub fn encoder_input(image: &DynamicImage, pre: &Preprocessing) -> Result<(Array4<f32>, LetterboxTransform)> {
    pre.normalization.validate()?;
    let t = LetterboxTransform::new(
        image.width() as usize,
        image.height() as usize,
        pre.input_size,
        Placement::TopLeft,
    )?;
    let (w, h) = t.content_size();
    let rgb = image.to_rgb8();
    let resized = if (w, h) == (t.src_w, t.src_h) {
        rgb
    } else {
        resize_bilinear(&rgb, w, h)
    };
    let mut out = Array4::<f32>::zeros((1, 3, t.dst, t.dst));
    normalize_into(&resized, &pre.normalization, out.index_axis_mut(Axis(0), 0));
    Ok((out, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    HFlip,
}

/// Applies each op with probability 1/2, making the same decision for the
/// image and its mask. Deterministic in `seed`.
pub fn augment(
    image: &DynamicImage,
    mask: &BinaryMask,
    ops: &[AugmentOp],
    seed: u64,
) -> Result<(DynamicImage, BinaryMask)> {
    if (image.width() as usize, image.height() as usize) != mask.dims() {
        return Err(Error::data(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut image, mut mask) = (image.clone(), mask.clone());
    for op in ops {
        match op {
            AugmentOp::HFlip => {
                if rng.gen_bool(0.5) {
                    image = image.fliph();
                    mask = mask.flip_horizontal();
                }
            }
        }
    }
    Ok((image, mask))
}
