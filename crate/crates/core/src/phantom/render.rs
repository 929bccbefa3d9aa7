//! Signed-distance rendering of one hip image.
//!
//! Shapes are laid out on a 128-unit canonical canvas (left hip, femoral
//! head upper right, shaft running down to the bottom edge) and mapped to
//! the output grid through a jittered similarity transform. Coordinates are
//! continuous: pixel `i` covers `[i, i + 1)`.

use rand::Rng;

use super::{FractureLocation, Landmarks, PhantomSpec, View};
use crate::raster::{BoundingBox, Image, Point};
use crate::rng;

const CANVAS: f64 = 128.0;
const TISSUE: f64 = 0.22;
const FEMUR: f64 = 0.62;
const PELVIS: f64 = 0.5;
/// Margin added around the landmark extent of the true box, canonical units.
pub const BOX_MARGIN: f64 = 4.0;

type V = (f64, f64);

fn sub(a: V, b: V) -> V {
    (a.0 - b.0, a.1 - b.1)
}
fn add(a: V, b: V) -> V {
    (a.0 + b.0, a.1 + b.1)
}
fn mul(a: V, k: f64) -> V {
    (a.0 * k, a.1 * k)
}
fn dot(a: V, b: V) -> f64 {
    a.0 * b.0 + a.1 * b.1
}
fn norm(a: V) -> f64 {
    dot(a, a).sqrt()
}

fn disc(p: V, c: V, r: f64) -> f64 {
    norm(sub(p, c)) - r
}

/// Distance to a segment of half-width `hw`.
fn capsule(p: V, a: V, b: V, hw: f64) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    norm(sub(p, add(a, mul(ab, t)))) - hw
}

/// Approximate distance to an elliptical ring of thickness `t`.
fn ellipse_ring(p: V, c: V, rx: f64, ry: f64, t: f64) -> f64 {
    let d = sub(p, c);
    let k = (d.0 * d.0 / (rx * rx) + d.1 * d.1 / (ry * ry)).sqrt();
    ((k - 1.0) * rx.min(ry)).abs() - t / 2.0
}

/// Anti-aliased coverage of a shape at signed distance `d` (in output pixels).
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Canonical-space geometry of one hip after per-image shape jitter.
#[derive(Clone, Debug)]
pub(crate) struct HipGeometry {
    view: View,
    head: V,
    head_r: f64,
    neck_a: V,
    neck_b: V,
    neck_hw: f64,
    greater: V,
    greater_r: f64,
    lesser: V,
    lesser_r: f64,
    shaft_a: V,
    shaft_b: V,
    shaft_hw: f64,
    /// Similarity map canonical → output pixels.
    scale: f64,
    cos: f64,
    sin: f64,
    shift: V,
}

impl HipGeometry {
    pub(crate) fn sample<R: Rng + ?Sized>(spec: &PhantomSpec, view: View, r: &mut R) -> Self {
        let g = spec.geometry_jitter;
        let mut j = |m: f64| rng::uniform(r, -m * g, m * g);
        let s = spec.image_size as f64 / CANVAS;
        let scale = s * (1.0 + j(0.08));
        let angle = j(6.0).to_radians();
        let shift = (j(8.0) * s, j(8.0) * s);
        let head_r = 13.0 + j(1.5);
        match view {
            View::Frontal => {
                let head = (74.0 + j(2.0), 42.0 + j(2.0));
                let neck_angle = (143.0 + j(6.0)).to_radians();
                let dir = (neck_angle.cos(), neck_angle.sin());
                let neck_len = 34.0 + j(3.0);
                let neck_a = add(head, mul(dir, head_r - 3.0));
                let neck_b = add(head, mul(dir, neck_len));
                let shaft_a = add(neck_b, (2.0, 6.0));
                let shaft_b = (shaft_a.0 - 8.0 + j(3.0), 150.0);
                HipGeometry {
                    view,
                    head,
                    head_r,
                    neck_a,
                    neck_b,
                    neck_hw: 6.0 + j(0.8),
                    greater: add(neck_b, (-6.0 + j(1.5), -10.0 + j(1.5))),
                    greater_r: 8.0 + j(1.0),
                    lesser: add(shaft_a, (11.0 + j(1.5), 14.0 + j(1.5))),
                    lesser_r: 5.0 + j(0.8),
                    shaft_a,
                    shaft_b,
                    shaft_hw: 9.0 + j(1.0),
                    scale,
                    cos: angle.cos(),
                    sin: angle.sin(),
                    shift,
                }
            }
            View::Lateral => {
                // frog-leg style: head central, shaft running out to the right
                let head = (60.0 + j(3.0), 58.0 + j(3.0));
                let shaft_a = add(head, (14.0, 8.0));
                HipGeometry {
                    view,
                    head,
                    head_r: head_r + 2.0,
                    neck_a: head,
                    neck_b: shaft_a,
                    neck_hw: 9.0,
                    greater: add(head, (22.0 + j(2.0), -2.0 + j(2.0))),
                    greater_r: 6.0,
                    lesser: add(head, (18.0 + j(2.0), 18.0 + j(2.0))),
                    lesser_r: 4.0,
                    shaft_a,
                    shaft_b: (150.0, shaft_a.1 + 14.0 + j(4.0)),
                    shaft_hw: 10.0 + j(1.0),
                    scale,
                    cos: angle.cos(),
                    sin: angle.sin(),
                    shift,
                }
            }
        }
    }

    fn centre(&self) -> V {
        (CANVAS / 2.0, CANVAS / 2.0)
    }

    fn to_canvas(&self, q: V, size: f64) -> V {
        let c = self.centre();
        let oc = mul(c, size / CANVAS);
        let d = mul(sub(sub(q, oc), self.shift), 1.0 / self.scale);
        add(
            c,
            (
                self.cos * d.0 + self.sin * d.1,
                -self.sin * d.0 + self.cos * d.1,
            ),
        )
    }

    fn map(&self, p: V, size: f64) -> V {
        let c = self.centre();
        let d = sub(p, c);
        let r = (
            self.cos * d.0 - self.sin * d.1,
            self.sin * d.0 + self.cos * d.1,
        );
        add(add(mul(c, size / CANVAS), mul(r, self.scale)), self.shift)
    }

    pub(crate) fn landmarks(&self, size: usize) -> Landmarks {
        let s = size as f64;
        let pt = |v: V| {
            let (x, y) = self.map(v, s);
            Point { x, y }
        };
        Landmarks {
            femoral_head: pt(self.head),
            greater_trochanter: pt(self.greater),
            lesser_trochanter: pt(self.lesser),
        }
    }

    /// Landmark extent plus head radius and a fixed margin.
    pub(crate) fn true_bbox(&self, size: usize) -> BoundingBox {
        let s = size as f64;
        let r = self.head_r + BOX_MARGIN;
        let mut pts = Vec::new();
        for (c, rad) in [
            (self.head, r),
            (self.greater, BOX_MARGIN + 2.0),
            (self.lesser, BOX_MARGIN + 2.0),
        ] {
            for (dx, dy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                pts.push(self.map(add(c, (dx * rad, dy * rad)), s));
            }
        }
        let x0 = pts
            .iter()
            .map(|p| p.0)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let x1 = pts
            .iter()
            .map(|p| p.0)
            .fold(f64::NEG_INFINITY, f64::max)
            .min(s);
        let y0 = pts
            .iter()
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let y1 = pts
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
            .min(s);
        BoundingBox::from_pixel_edges(x0, y0, x1, y1, size, size)
    }

    /// Output pixels per canonical unit.
    pub(crate) fn scale(&self) -> f64 {
        self.scale
    }

    fn neck_dir(&self) -> V {
        let d = sub(self.neck_b, self.neck_a);
        mul(d, 1.0 / norm(d))
    }

    /// Signed distance to the neck, in canonical units.
    pub(crate) fn neck_distance(&self, p: V) -> f64 {
        capsule(p, self.neck_a, self.neck_b, self.neck_hw)
    }

    /// Canonical point of an output pixel centre.
    pub(crate) fn canvas_point(&self, x: usize, y: usize, size: usize) -> V {
        self.to_canvas((x as f64 + 0.5, y as f64 + 0.5), size as f64)
    }
}

/// Fracture band across the neck: position along the neck and thickness.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FractureShape {
    pub along: f64,
    pub tilt: f64,
    pub thickness: f64,
}

impl FractureShape {
    pub(crate) fn sample<R: Rng + ?Sized>(loc: FractureLocation, r: &mut R) -> Self {
        let along = match loc {
            FractureLocation::IntraCapsular => rng::uniform(r, 0.28, 0.45),
            _ => rng::uniform(r, 0.72, 0.88),
        };
        FractureShape {
            along,
            tilt: rng::uniform(r, -0.35, 0.35),
            thickness: rng::uniform(r, 1.6, 2.4),
        }
    }
}

/// Metal implant: a bright bar along the neck axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MetalShape {
    pub start: f64,
    pub length: f64,
    pub half_width: f64,
}

impl MetalShape {
    pub(crate) fn sample<R: Rng + ?Sized>(r: &mut R) -> Self {
        MetalShape {
            start: rng::uniform(r, 0.0, 0.3),
            length: rng::uniform(r, 16.0, 22.0),
            half_width: rng::uniform(r, 2.5, 3.5),
        }
    }
}

/// Global intensity nuisance: gamma, contrast, offset and a linear ramp.
#[derive(Clone, Copy, Debug)]
pub(crate) struct IntensityJitter {
    gamma: f64,
    contrast: f64,
    offset: f64,
    ramp: V,
}

impl IntensityJitter {
    pub(crate) fn sample<R: Rng + ?Sized>(amount: f64, r: &mut R) -> Self {
        let a = (rng::uniform(r, 0.0, std::f64::consts::TAU)).sin_cos();
        IntensityJitter {
            gamma: rng::uniform(r, -amount, amount).exp(),
            contrast: 1.0 + rng::uniform(r, -amount, amount),
            offset: rng::uniform(r, -amount, amount) / 2.0,
            ramp: mul((a.1, a.0), rng::uniform(r, 0.0, amount) / 2.0),
        }
    }

    fn apply(&self, v: f64, u: V) -> f64 {
        let ramp = self.ramp.0 * (u.0 - 0.5) + self.ramp.1 * (u.1 - 0.5);
        (self.contrast * v.max(0.0).powf(self.gamma) + self.offset + ramp).clamp(0.0, 1.0)
    }
}

pub(crate) struct RenderInputs<'a> {
    pub spec: &'a PhantomSpec,
    pub geometry: &'a HipGeometry,
    pub fracture: Option<FractureShape>,
    pub metal: Option<MetalShape>,
    pub intensity: IntensityJitter,
    pub noise_seed: u64,
}

/// Fracture darkening factor in `[0, 1]` at canonical point `p`.
fn fracture_mask(geo: &HipGeometry, f: &FractureShape, p: V, px: f64) -> f64 {
    let dir = geo.neck_dir();
    let normal = (-dir.1, dir.0);
    let along = add(geo.neck_a, mul(sub(geo.neck_b, geo.neck_a), f.along));
    let axis = add(dir, mul(normal, f.tilt));
    let axis = mul(axis, 1.0 / norm(axis));
    let band = (dot(sub(p, along), axis)).abs() - f.thickness / 2.0;
    coverage(band / px) * coverage(geo.neck_distance(p) / px)
}

fn pelvis(p: V, view: View) -> f64 {
    match view {
        View::Frontal => {
            let ilium = ellipse_ring(p, (106.0, 4.0), 32.0, 24.0, 6.0);
            let obturator = ellipse_ring(p, (100.0, 94.0), 16.0, 12.0, 4.0);
            let ramus = capsule(p, (86.0, 78.0), (132.0, 70.0), 5.0);
            ilium.min(obturator).min(ramus)
        }
        View::Lateral => {
            let ischium = ellipse_ring(p, (40.0, 30.0), 26.0, 18.0, 7.0);
            let pubis = capsule(p, (20.0, 80.0), (50.0, 100.0), 6.0);
            ischium.min(pubis)
        }
    }
}

/// Render in `[0, 1]`, quantised to 8 bits.
pub(crate) fn render(inp: &RenderInputs) -> Image {
    let size = inp.spec.image_size;
    let geo = inp.geometry;
    let px = 1.0 / geo.scale;
    let mut noise = rng::stream(inp.noise_seed, &[]);
    let mut data = Vec::with_capacity(size * size);
    let dir = geo.neck_dir();
    for y in 0..size {
        for x in 0..size {
            let p = geo.canvas_point(x, y, size);
            let u = (
                (x as f64 + 0.5) / size as f64,
                (y as f64 + 0.5) / size as f64,
            );
            // acetabular roof over the head (upper half only)
            let roof = {
                let d = sub(p, geo.head);
                let ring = (norm(d) - (geo.head_r + 4.0)).abs() - 1.6;
                if d.1 < 2.0 {
                    ring
                } else {
                    f64::INFINITY
                }
            };
            let pel = coverage(pelvis(p, geo.view).min(roof) / px);
            let femur_d = disc(p, geo.head, geo.head_r)
                .min(geo.neck_distance(p))
                .min(disc(p, geo.greater, geo.greater_r))
                .min(disc(p, geo.lesser, geo.lesser_r))
                .min(capsule(p, geo.shaft_a, geo.shaft_b, geo.shaft_hw));
            let mut fem = coverage(femur_d / px);
            // slightly denser cortex along the shaft edges
            let cortex =
                coverage((capsule(p, geo.shaft_a, geo.shaft_b, geo.shaft_hw).abs() - 1.5) / px);
            if let Some(f) = &inp.fracture {
                fem *= 1.0 - 0.85 * fracture_mask(geo, f, p, px);
            }
            let mut v = TISSUE + (FEMUR - TISSUE) * fem + 0.08 * cortex * fem;
            v = v.max(TISSUE + (PELVIS - TISSUE) * pel);
            v = inp.intensity.apply(v, u);
            if let Some(m) = &inp.metal {
                let a = add(geo.neck_a, mul(sub(geo.neck_b, geo.neck_a), m.start));
                let b = add(a, mul(dir, m.length));
                let c = coverage(capsule(p, a, b, m.half_width) / px);
                v = v * (1.0 - c) + c;
            }
            v += inp.spec.noise_sigma * rng::normal(&mut noise);
            data.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
        }
    }
    Image {
        width: size,
        height: size,
        data,
    }
}
