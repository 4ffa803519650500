use std::ops::Range;

use image::{GrayImage, Luma};
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};

use crate::dataset::BinaryMask;
use crate::error::{Error, Result};

/// Default minimum component area (pixels) kept by [`derive_boxes`].
pub const DEFAULT_MIN_AREA: usize = 16;

/// Axis-aligned box in original-image pixel coordinates.
///
/// The box is half-open: `[x0, x1) x [y0, y1)`, so `width = x1 - x0`.
/// Coordinates are real-valued because detector output and letterbox
/// mapping produce fractional corners; boxes derived from masks always
/// have integral corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or empty extents.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) || x0 >= x1 || y0 >= y1 {
            return Err(Error::data(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// Box from center and size, as emitted by detector heads.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// True when the box is non-empty and lies inside `[0, width] x [0, height]`.
    pub fn is_within(&self, width: f64, height: f64) -> bool {
        0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= width
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= height
    }

    /// Intersection with `[0, width] x [0, height]`. The result may be empty.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    /// Column and row ranges of the pixels whose centers fall inside the box,
    /// restricted to a `width x height` grid.
    pub fn pixel_span(&self, width: usize, height: usize) -> Option<(Range<usize>, Range<usize>)> {
        let span = |lo: f64, hi: f64, limit: usize| {
            let start = (lo - 0.5).ceil().max(0.0);
            let end = (hi - 0.5).ceil().min(limit as f64);
            (start < end).then_some(start as usize..end as usize)
        };
        Some((span(self.x0, self.x1, width)?, span(self.y0, self.y1, height)?))
    }
}

/// One tight box per 8-connected foreground component of at least
/// `min_area` pixels, sorted by `(y0, x0)`.
pub fn derive_boxes(mask: &BinaryMask, min_area: usize) -> Vec<BBox> {
    let (w, h) = mask.dims();
    if w == 0 || h == 0 || mask.is_blank() {
        return Vec::new();
    }
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([u8::from(mask.get(x as usize, y as usize))])
    });
    let labels = connected_components(&gray, Connectivity::Eight, Luma([0u8]));

    // label -> (min_x, min_y, max_x, max_y, area)
    type Extent = (u32, u32, u32, u32, usize);
    let mut extents: Vec<Option<Extent>> = Vec::new();
    for (x, y, label) in labels.enumerate_pixels() {
        let label = label.0[0] as usize;
        if label == 0 {
            continue;
        }
        if extents.len() <= label {
            extents.resize(label + 1, None);
        }
        let e = extents[label].get_or_insert((x, y, x, y, 0));
        e.0 = e.0.min(x);
        e.1 = e.1.min(y);
        e.2 = e.2.max(x);
        e.3 = e.3.max(y);
        e.4 += 1;
    }

    let mut boxes: Vec<BBox> = extents
        .into_iter()
        .flatten()
        .filter(|e| e.4 >= min_area)
        .map(|(x0, y0, x1, y1, _)| BBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: (x1 + 1) as f64,
            y1: (y1 + 1) as f64,
        })
        .collect();
    boxes.sort_by(|a, b| {
        (a.y0, a.x0, a.y1, a.x1)
            .partial_cmp(&(b.y0, b.x0, b.y1, b.x1))
            .expect("integral box corners")
    });
    boxes
}
