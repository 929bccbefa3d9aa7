//! Single-channel float images and the resampling helpers shared by the
//! phantom renderer, augmentation and ROI cropping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// The four source pixels and weights of a clamped bilinear sample.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> [(usize, usize, f64); 4] {
    let cx = x.clamp(0.0, (width - 1) as f64);
    let cy = y.clamp(0.0, (height - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ]
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at pixel-centre coordinates, clamped to the edge.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let taps = bilinear_taps(x, y, self.width, self.height);
        // separable form keeps integer coordinates bit-exact
        let [(x0, y0, _), (x1, _, _), (_, y1, _), _] = taps;
        let cx = x.clamp(0.0, (self.width - 1) as f64);
        let cy = y.clamp(0.0, (self.height - 1) as f64);
        let fx = (cx - x0 as f64) as f32;
        let fy = (cy - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Mean over `factor × factor` blocks. Dimensions must divide evenly.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::shape(format!(
                "cannot downsample {}×{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = vec![0.0f32; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                out[(y / factor) * w + x / factor] += self.get(x, y);
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        Image::new(w, h, out)
    }

    /// Bilinear resize mapping pixel centres onto pixel centres.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                out.push(self.sample((x as f64 + 0.5) * sx - 0.5, fy));
            }
        }
        Image {
            width,
            height,
            data: out,
        }
    }

    pub fn mirror_horizontal(&self) -> Image {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Clamp to `[0, 1]` and quantise to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Inverse of [`to_u8`](Self::to_u8) on images already quantised to
    /// `k / 255` (computed in 64-bit, as the phantom renderer does).
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(
            width,
            height,
            bytes.iter().map(|&b| (b as f64 / 255.0) as f32).collect(),
        )
    }
}

/// Point in pixel coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox {
        center_x: 0.5,
        center_y: 0.5,
        width: 1.0,
        height: 1.0,
    };

    /// Box spanning pixel-edge coordinates `[x0, x1] × [y0, y1]` of a
    /// `width × height` image.
    pub fn from_pixel_edges(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (w, h) = (width as f64, height as f64);
        BoundingBox {
            center_x: (x0 + x1) / 2.0 / w,
            center_y: (y0 + y1) / 2.0 / h,
            width: (x1 - x0) / w,
            height: (y1 - y0) / h,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.center_x, self.center_y, self.width, self.height]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoundingBox {
            center_x: v[0],
            center_y: v[1],
            width: v[2],
            height: v[3],
        }
    }

    /// Positive size and a nonempty overlap with the unit square.
    pub fn is_valid(&self) -> bool {
        let finite = self.as_array().iter().all(|v| v.is_finite());
        finite
            && self.width > 0.0
            && self.height > 0.0
            && self.center_x - self.width / 2.0 < 1.0
            && self.center_x + self.width / 2.0 > 0.0
            && self.center_y - self.height / 2.0 < 1.0
            && self.center_y + self.height / 2.0 > 0.0
    }

    /// Inclusive containment of a pixel-coordinate point.
    pub fn contains(&self, p: Point, width: usize, height: usize) -> bool {
        let (x, y) = (p.x / width as f64, p.y / height as f64);
        x >= self.center_x - self.width / 2.0
            && x <= self.center_x + self.width / 2.0
            && y >= self.center_y - self.height / 2.0
            && y <= self.center_y + self.height / 2.0
    }
}
