//! Affine jitter and histogram matching for training images, plus the
//! technique ablation harness.

mod ablation;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::SampleTransform;
use crate::raster::Image;
use crate::rng;

pub use ablation::{ablation_run, AblationRow, AblationTable, TechniqueMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the image side.
    pub max_translation_fraction: f64,
    pub max_rotation_degrees: f64,
    pub max_shear_degrees: f64,
    pub histogram_match_enabled: bool,
    /// Chance that a training image is matched; the rest keep their own
    /// intensities, which is what evaluation images look like.
    pub histogram_match_probability: f64,
    /// Number of training images kept as histogram references.
    pub reference_pool_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_translation_fraction: 0.05,
            max_rotation_degrees: 10.0,
            max_shear_degrees: 5.0,
            histogram_match_enabled: true,
            histogram_match_probability: 0.5,
            reference_pool_size: 64,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            max_translation_fraction: 0.0,
            max_rotation_degrees: 0.0,
            max_shear_degrees: 0.0,
            histogram_match_enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_translation_fraction", self.max_translation_fraction),
            ("max_rotation_degrees", self.max_rotation_degrees),
            ("max_shear_degrees", self.max_shear_degrees),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.histogram_match_probability) {
            return Err(Error::invalid(
                "histogram_match_probability must lie in [0, 1]",
            ));
        }
        if self.max_shear_degrees >= 90.0 {
            return Err(Error::invalid("max_shear_degrees must be below 90"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.max_translation_fraction == 0.0
            && self.max_rotation_degrees == 0.0
            && self.max_shear_degrees == 0.0
            && !(self.histogram_match_enabled && self.histogram_match_probability > 0.0)
    }
}

/// Concrete affine parameters; translation in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub dx: f64,
    pub dy: f64,
    pub rotation_degrees: f64,
    pub shear_degrees: f64,
}

/// One sampled augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub translate_x_fraction: f64,
    pub translate_y_fraction: f64,
    pub rotation_degrees: f64,
    pub shear_degrees: f64,
    /// Index into the reference pool, when histogram matching is on.
    pub reference: Option<usize>,
}

impl AugmentDraw {
    pub fn affine(&self, width: usize, height: usize) -> AffineParams {
        AffineParams {
            dx: self.translate_x_fraction * width as f64,
            dy: self.translate_y_fraction * height as f64,
            rotation_degrees: self.rotation_degrees,
            shear_degrees: self.shear_degrees,
        }
    }
}

pub fn sample_augmentation<R: Rng + ?Sized>(
    config: &AugmentConfig,
    pool_len: usize,
    rng: &mut R,
) -> AugmentDraw {
    let mut sym = |m: f64| rng::uniform(rng, -m, m);
    let translate_x_fraction = sym(config.max_translation_fraction);
    let translate_y_fraction = sym(config.max_translation_fraction);
    let rotation_degrees = sym(config.max_rotation_degrees);
    let shear_degrees = sym(config.max_shear_degrees);
    let reference = if config.histogram_match_enabled && pool_len > 0 {
        let pick = rng.random_range(0..pool_len);
        (rng::uniform(rng, 0.0, 1.0) < config.histogram_match_probability).then_some(pick)
    } else {
        None
    };
    AugmentDraw {
        translate_x_fraction,
        translate_y_fraction,
        rotation_degrees,
        shear_degrees,
        reference,
    }
}

/// Resample through the inverse of `translate ∘ rotate ∘ shear` about the
/// image centre, bilinear with edge clamping.
pub fn affine_transform(image: &Image, p: &AffineParams) -> Image {
    let cx = (image.width as f64 - 1.0) / 2.0;
    let cy = (image.height as f64 - 1.0) / 2.0;
    let (s, c) = p.rotation_degrees.to_radians().sin_cos();
    let k = p.shear_degrees.to_radians().tan();
    // forward A = R·[[1, k], [0, 1]]; inverse = [[1, -k], [0, 1]]·Rᵀ
    let (a, b) = (c + k * s, s - k * c);
    let (d, e) = (-s, c);
    let mut out = Vec::with_capacity(image.data.len());
    for y in 0..image.height {
        let v = y as f64 - cy - p.dy;
        for x in 0..image.width {
            let u = x as f64 - cx - p.dx;
            out.push(image.sample(a * u + b * v + cx, d * u + e * v + cy));
        }
    }
    Image {
        width: image.width,
        height: image.height,
        data: out,
    }
}

fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    match xp.binary_search_by(|v| v.total_cmp(&x)) {
        Ok(i) => fp[i],
        Err(0) => fp[0],
        Err(i) if i == xp.len() => fp[xp.len() - 1],
        Err(i) => {
            let t = (x - xp[i - 1]) / (xp[i] - xp[i - 1]);
            fp[i - 1] + t * (fp[i] - fp[i - 1])
        }
    }
}

/// Sorted distinct values and their cumulative quantiles.
fn quantiles(data: &[f32]) -> (Vec<f32>, Vec<f64>) {
    let mut sorted = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len() as f64;
    let mut values = Vec::new();
    let mut q = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if values.last() == Some(&v) {
            *q.last_mut().unwrap() = (i + 1) as f64 / n;
        } else {
            values.push(v);
            q.push((i + 1) as f64 / n);
        }
    }
    (values, q)
}

/// Map intensities so the empirical CDF follows the reference's.
pub fn histogram_match(image: &Image, reference: &Image) -> Image {
    let (src_values, src_q) = quantiles(&image.data);
    let (ref_values, ref_q) = quantiles(&reference.data);
    let ref_f: Vec<f64> = ref_values.iter().map(|&v| v as f64).collect();
    let mapped: Vec<f32> = src_q
        .iter()
        .map(|&q| interp(q, &ref_q, &ref_f) as f32)
        .collect();
    let data = image
        .data
        .iter()
        .map(|v| {
            let i = src_values
                .binary_search_by(|s| s.total_cmp(v))
                .expect("value comes from the image");
            mapped[i]
        })
        .collect();
    Image {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Training-time augmenter with a fixed pool of histogram references.
#[derive(Clone, Debug)]
pub struct Augmenter {
    config: AugmentConfig,
    pool: Vec<Image>,
}

impl Augmenter {
    /// References are drawn from `training_images` only.
    pub fn new(config: AugmentConfig, training_images: &[&[f32]], size: usize) -> Self {
        let mut pool = Vec::new();
        if config.histogram_match_enabled && !training_images.is_empty() {
            let mut idx: Vec<usize> = (0..training_images.len()).collect();
            rng::shuffle(
                &mut rng::stream(config.seed, &[rng::tag("reference-pool")]),
                &mut idx,
            );
            idx.truncate(config.reference_pool_size.max(1));
            idx.sort_unstable();
            pool = idx
                .into_iter()
                .map(|i| Image {
                    width: size,
                    height: size,
                    data: training_images[i].to_vec(),
                })
                .collect();
        }
        Augmenter { config, pool }
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn apply(&self, image: &Image, draw: &AugmentDraw) -> Image {
        let matched;
        let src = match draw.reference {
            Some(r) => {
                matched = histogram_match(image, &self.pool[r]);
                &matched
            }
            None => image,
        };
        affine_transform(src, &draw.affine(image.width, image.height))
    }
}

impl SampleTransform for Augmenter {
    fn transform(&self, image: &[f32], size: usize, rng: &mut dyn RngCore) -> Vec<f32> {
        let draw = sample_augmentation(&self.config, self.pool.len(), rng);
        let img = Image {
            width: size,
            height: size,
            data: image.to_vec(),
        };
        self.apply(&img, &draw).data
    }
}
