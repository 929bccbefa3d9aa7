//! Deterministic synthetic pelvis phantoms with known ground truth.
//!
//! Every hip image is a pure function of `(seed, case_index, side)` and its
//! drawn attributes (view, metal, fracture). Right hips are rendered in the
//! canonical left-hip orientation, i.e. stored mirrored.

mod dataset;
mod render;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BoundingBox, Image, Point};
use crate::rng;

pub use dataset::{
    false_positive_rate_for_accuracy, generate_dataset, inject_label_noise, Dataset, NoiseConfig,
    NoiseMode, NoiseReport, SplitCounts,
};
pub use render::BOX_MARGIN;

use render::{FractureShape, HipGeometry, IntensityJitter, MetalShape, RenderInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Image-level fracture prevalence of the train and validation splits.
    pub fracture_prevalence: f64,
    /// Image-level fracture prevalence of the test split.
    pub test_fracture_prevalence: f64,
    pub metal_rate: f64,
    pub non_frontal_rate: f64,
    pub intensity_jitter: f64,
    /// Multiplier on the default pose and shape jitter ranges.
    pub geometry_jitter: f64,
    pub noise_sigma: f64,
    /// Minimum bright connected area of a rendered implant, in pixels.
    pub metal_min_pixels: usize,
    /// Probability that a case belongs to the previous case's patient.
    pub repeat_patient_rate: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 128,
            fracture_prevalence: 0.12,
            test_fracture_prevalence: 0.19,
            metal_rate: 0.05,
            non_frontal_rate: 0.10,
            intensity_jitter: 0.15,
            geometry_jitter: 1.0,
            noise_sigma: 0.03,
            metal_min_pixels: 30,
            repeat_patient_rate: 0.2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fracture_prevalence", self.fracture_prevalence),
            ("test_fracture_prevalence", self.test_fracture_prevalence),
            ("metal_rate", self.metal_rate),
            ("non_frontal_rate", self.non_frontal_rate),
            ("repeat_patient_rate", self.repeat_patient_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for (name, v) in [
            ("intensity_jitter", self.intensity_jitter),
            ("geometry_jitter", self.geometry_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.intensity_jitter >= 0.5 {
            return Err(Error::invalid("intensity_jitter must be below 0.5"));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(
                "image_size must be a multiple of 4 and at least 32",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    Frontal,
    Lateral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FractureLocation {
    None,
    IntraCapsular,
    ExtraCapsular,
}

impl FractureLocation {
    /// Class index of the location head.
    pub fn class_index(self) -> usize {
        match self {
            FractureLocation::None => 0,
            FractureLocation::IntraCapsular => 1,
            FractureLocation::ExtraCapsular => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    SyntheticTruth,
    NoisyInitial,
    OracleReview,
    HumanReview,
}

impl LabelSource {
    fn stage(self) -> u8 {
        match self {
            LabelSource::SyntheticTruth => 0,
            LabelSource::NoisyInitial => 1,
            LabelSource::OracleReview | LabelSource::HumanReview => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelProvenance {
    pub source: LabelSource,
    pub round: u32,
}

impl LabelProvenance {
    pub const TRUTH: LabelProvenance = LabelProvenance {
        source: LabelSource::SyntheticTruth,
        round: 0,
    };

    /// Move to `next`; provenance never steps backwards.
    pub fn advance(&mut self, next: LabelProvenance) -> Result<()> {
        if next.source.stage() < self.source.stage()
            || (next.source.stage() == self.source.stage() && next.round < self.round)
        {
            return Err(Error::Conflict(format!(
                "label provenance cannot move from {:?} round {} to {:?} round {}",
                self.source, self.round, next.source, next.round
            )));
        }
        *self = next;
        Ok(())
    }
}

/// The fracture label training code sees. `location: None` means unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractureLabel {
    pub fracture: bool,
    pub location: Option<FractureLocation>,
    pub provenance: LabelProvenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub femoral_head: Point,
    pub greater_trochanter: Point,
    pub lesser_trochanter: Point,
}

impl Landmarks {
    pub fn points(&self) -> [Point; 3] {
        [
            self.femoral_head,
            self.greater_trochanter,
            self.lesser_trochanter,
        ]
    }
}

/// Provenance of the fields that are never noised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedProvenance {
    pub view: LabelProvenance,
    pub metal: LabelProvenance,
    pub bbox: LabelProvenance,
}

impl Default for FixedProvenance {
    fn default() -> Self {
        FixedProvenance {
            view: LabelProvenance::TRUTH,
            metal: LabelProvenance::TRUTH,
            bbox: LabelProvenance::TRUTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HipRecord {
    pub image_id: String,
    pub side: Side,
    /// Stored in canonical orientation (true for right hips).
    pub mirrored: bool,
    pub metal: bool,
    /// Ground truth; read only by audits, gates and evaluation.
    pub fracture: bool,
    pub location: FractureLocation,
    pub true_bbox: BoundingBox,
    pub landmarks: Landmarks,
    /// Current (possibly noisy) fracture label.
    pub label: FractureLabel,
    pub provenance: FixedProvenance,
    /// Path relative to the dataset root, once written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl HipRecord {
    /// Frontal, metal-free: the population the fracture model scores.
    pub fn fracture_eligible(&self, view: View) -> bool {
        view == View::Frontal && !self.metal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub case_index: u64,
    pub patient_id: String,
    pub view: View,
    pub split: Split,
    pub hips: [HipRecord; 2],
}

/// Drawn attributes of one hip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HipAttributes {
    pub metal: bool,
    pub location: FractureLocation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseAttributes {
    pub view: View,
    pub hips: [HipAttributes; 2],
}

impl CaseAttributes {
    /// Independent draws at the spec's rates (`fracture_prevalence`).
    pub fn draw(spec: &PhantomSpec, case_index: u64) -> Self {
        let mut r = rng::stream(spec.seed, &[rng::tag("attributes"), case_index]);
        let view = if rng::uniform(&mut r, 0.0, 1.0) < spec.non_frontal_rate {
            View::Lateral
        } else {
            View::Frontal
        };
        let mut hip = || {
            let fracture = rng::uniform(&mut r, 0.0, 1.0) < spec.fracture_prevalence;
            let metal = rng::uniform(&mut r, 0.0, 1.0) < spec.metal_rate;
            let intra = rng::uniform(&mut r, 0.0, 1.0) < 0.5;
            match (view, fracture, metal) {
                (View::Frontal, true, _) => HipAttributes {
                    metal: false,
                    location: if intra {
                        FractureLocation::IntraCapsular
                    } else {
                        FractureLocation::ExtraCapsular
                    },
                },
                (View::Frontal, false, m) => HipAttributes {
                    metal: m,
                    location: FractureLocation::None,
                },
                (View::Lateral, ..) => HipAttributes {
                    metal: false,
                    location: FractureLocation::None,
                },
            }
        };
        let hips = [hip(), hip()];
        CaseAttributes { view, hips }
    }
}

/// A case with its two rendered images.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedCase {
    pub case: Case,
    pub images: [Image; 2],
}

pub fn image_id(case_index: u64, side: Side) -> String {
    let s = match side {
        Side::Left => "L",
        Side::Right => "R",
    };
    format!("C{case_index:05}-{s}")
}

fn side_tag(side: Side) -> u64 {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

/// Render one hip with every latent variable drawn from its own stream,
/// so toggling the fracture or implant leaves everything else unchanged.
pub fn render_hip(
    spec: &PhantomSpec,
    case_index: u64,
    side: Side,
    view: View,
    attrs: HipAttributes,
) -> (Image, BoundingBox, Landmarks) {
    let st = side_tag(side);
    let stream = |name: &str| rng::stream(spec.seed, &[rng::tag(name), case_index, st]);
    let geometry = HipGeometry::sample(spec, view, &mut stream("geometry"));
    let fracture_shape = FractureShape::sample(attrs.location, &mut stream("fracture-shape"));
    let metal_shape = MetalShape::sample(&mut stream("metal-shape"));
    let intensity = IntensityJitter::sample(spec.intensity_jitter, &mut stream("intensity"));
    let frontal = view == View::Frontal;
    let image = render::render(&RenderInputs {
        spec,
        geometry: &geometry,
        fracture: (frontal && attrs.location != FractureLocation::None).then_some(fracture_shape),
        metal: (frontal && attrs.metal).then_some(metal_shape),
        intensity,
        noise_seed: rng::stream(spec.seed, &[rng::tag("noise"), case_index, st]).next_u64(),
    });
    (
        image,
        geometry.true_bbox(spec.image_size),
        geometry.landmarks(spec.image_size),
    )
}

/// Distance in pixels from each pixel centre to the rendered neck, for
/// checking where a fracture may change the image.
pub fn neck_distance_map(spec: &PhantomSpec, case_index: u64, side: Side, view: View) -> Vec<f64> {
    let st = side_tag(side);
    let geometry = HipGeometry::sample(
        spec,
        view,
        &mut rng::stream(spec.seed, &[rng::tag("geometry"), case_index, st]),
    );
    let n = spec.image_size;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(geometry.neck_distance(geometry.canvas_point(x, y, n)) * geometry.scale());
        }
    }
    out
}

pub fn render_case(
    spec: &PhantomSpec,
    case_index: u64,
    attrs: &CaseAttributes,
    split: Split,
    patient_id: String,
) -> RenderedCase {
    let mut images = Vec::with_capacity(2);
    let mut hips = Vec::with_capacity(2);
    for (h, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        let a = attrs.hips[h];
        let (img, bbox, landmarks) = render_hip(spec, case_index, side, attrs.view, a);
        images.push(img);
        let fracture = a.location != FractureLocation::None;
        hips.push(HipRecord {
            image_id: image_id(case_index, side),
            side,
            mirrored: side == Side::Right,
            metal: a.metal,
            fracture,
            location: a.location,
            true_bbox: bbox,
            landmarks,
            label: FractureLabel {
                fracture,
                location: Some(a.location),
                provenance: LabelProvenance::TRUTH,
            },
            provenance: FixedProvenance::default(),
            image_path: None,
        });
    }
    let [i0, i1]: [Image; 2] = images.try_into().expect("two images");
    let [h0, h1]: [HipRecord; 2] = hips.try_into().expect("two hips");
    RenderedCase {
        case: Case {
            case_id: format!("C{case_index:05}"),
            case_index,
            patient_id,
            view: attrs.view,
            split,
            hips: [h0, h1],
        },
        images: [i0, i1],
    }
}

/// Stand-alone case with attributes drawn at the spec's rates.
pub fn generate_case(spec: &PhantomSpec, case_index: u64) -> RenderedCase {
    let attrs = CaseAttributes::draw(spec, case_index);
    render_case(
        spec,
        case_index,
        &attrs,
        Split::Train,
        format!("P{case_index:05}"),
    )
}
