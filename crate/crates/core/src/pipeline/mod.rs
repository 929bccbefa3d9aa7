//! Staged inference: frontal gate, neck-of-femur box, implant gate and
//! fracture scoring, with one disposition per hip image.

mod models;
mod stages;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use models::{
    CnnBackend, CnnStage, HipTruth, ModelSource, OracleBackend, OracleStage, StageBackend,
    StageInput, StageModel, StageOutput, StageRegistry, TruthTable, ORACLE_LOGIT,
};
pub use stages::{presence_only, stage_samples, Stage};

use crate::error::{Error, Result};
use crate::phantom::{Case, Landmarks};
use crate::raster::{bilinear_taps, BoundingBox, Image};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pass rule of the frontal gate: `sigmoid(logit) >= threshold`.
pub fn frontal_passes(logit: f64, threshold: f64) -> bool {
    sigmoid(logit) >= threshold
}

/// Pass rule of the implant gate. The logit scores implant presence, so the
/// gate passes when the implant-free probability reaches the threshold.
pub fn metal_passes(logit: f64, threshold: f64) -> bool {
    sigmoid(-logit) >= threshold
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "gate threshold must lie strictly between 0 and 1, got {t}"
        )))
    }
}

fn single_logit(input: &StageInput<'_>, model: &dyn StageModel) -> Result<f64> {
    if let Some(s) = model.input_size() {
        if input.image.width != s || input.image.height != s {
            return Err(Error::shape(format!(
                "{} model expects {s}×{s} input, got {}×{}",
                model.stage().name(),
                input.image.width,
                input.image.height
            )));
        }
    }
    match model.infer(std::slice::from_ref(input))?.as_slice() {
        [StageOutput::Logit(v)] => Ok(*v),
        _ => Err(Error::invalid(format!(
            "{} model did not return one logit",
            model.stage().name()
        ))),
    }
}

/// `(logit, pass)` of the frontal-view gate.
pub fn gate_frontal(
    input: &StageInput<'_>,
    model: &dyn StageModel,
    threshold: f64,
) -> Result<(f64, bool)> {
    check_threshold(threshold)?;
    let s = single_logit(input, model)?;
    Ok((s, frontal_passes(s, threshold)))
}

/// `(implant logit, pass)`; pass means no implant and the case continues.
pub fn gate_metal(
    input: &StageInput<'_>,
    model: &dyn StageModel,
    threshold: f64,
) -> Result<(f64, bool)> {
    check_threshold(threshold)?;
    let s = single_logit(input, model)?;
    Ok((s, metal_passes(s, threshold)))
}

pub fn box_from_logits(v: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(v.map(sigmoid))
}

pub fn locate_bbox(input: &StageInput<'_>, model: &dyn StageModel) -> Result<BoundingBox> {
    match model.infer(std::slice::from_ref(input))?.as_slice() {
        [StageOutput::Box(v)] => Ok(box_from_logits(*v)),
        _ => Err(Error::invalid("bounding model did not return one box")),
    }
}

/// All three landmarks inside the box, edges inclusive.
pub fn check_adequacy(
    bbox: &BoundingBox,
    landmarks: &Landmarks,
    width: usize,
    height: usize,
) -> bool {
    landmarks
        .points()
        .iter()
        .all(|&p| bbox.contains(p, width, height))
}

/// Crop through a pixel reader; every read is at an in-bounds index.
pub fn crop_roi_with<F: FnMut(usize, usize) -> f32>(
    width: usize,
    height: usize,
    bbox: &BoundingBox,
    out_size: usize,
    mut read: F,
) -> Image {
    let (w, h) = (width as f64, height as f64);
    let side = (bbox.width * w).max(bbox.height * h);
    let x0 = bbox.center_x * w - side / 2.0;
    let y0 = bbox.center_y * h - side / 2.0;
    let step = side / out_size as f64;
    let mut data = Vec::with_capacity(out_size * out_size);
    for j in 0..out_size {
        let sy = y0 + (j as f64 + 0.5) * step - 0.5;
        for i in 0..out_size {
            let sx = x0 + (i as f64 + 0.5) * step - 0.5;
            let v: f64 = bilinear_taps(sx, sy, width, height)
                .iter()
                .map(|&(x, y, wt)| read(x, y) as f64 * wt)
                .sum();
            data.push(v as f32);
        }
    }
    Image {
        width: out_size,
        height: out_size,
        data,
    }
}

/// Expand the box to a square about its centre and resample it to
/// `out_size × out_size`; parts outside the image repeat the edge.
pub fn crop_roi(image: &Image, bbox: &BoundingBox, out_size: usize) -> Image {
    crop_roi_with(image.width, image.height, bbox, out_size, |x, y| {
        image.get(x, y)
    })
}

/// Bring a square image to `size`: block-average when the ratio is an
/// integer, bilinear otherwise.
pub fn fit_input(image: &Image, size: usize) -> Image {
    if image.width == size && image.height == size {
        return image.clone();
    }
    if image.width == image.height && image.width > size && image.width.is_multiple_of(size) {
        if let Ok(d) = image.downsample(image.width / size) {
            return d;
        }
    }
    image.resize(size, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModelRef {
    /// Registered backend name (`cnn` or `oracle`).
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl StageModelRef {
    pub fn cnn(path: impl Into<PathBuf>) -> Self {
        StageModelRef {
            backend: "cnn".into(),
            checkpoint: Some(path.into()),
        }
    }

    pub fn oracle() -> Self {
        StageModelRef {
            backend: "oracle".into(),
            checkpoint: None,
        }
    }
}

impl Default for StageModelRef {
    fn default() -> Self {
        StageModelRef {
            backend: "cnn".into(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub frontal: StageModelRef,
    pub bounding: StageModelRef,
    pub metal: StageModelRef,
    pub fracture: StageModelRef,
    pub frontal_threshold: f64,
    /// Minimum implant-free probability to continue.
    pub metal_threshold: f64,
    pub roi_output_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frontal: StageModelRef::default(),
            bounding: StageModelRef::default(),
            metal: StageModelRef::default(),
            fracture: StageModelRef::default(),
            frontal_threshold: 0.5,
            metal_threshold: 0.5,
            roi_output_size: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.frontal_threshold)?;
        check_threshold(self.metal_threshold)?;
        if self.roi_output_size == 0 {
            return Err(Error::invalid("roi_output_size must be positive"));
        }
        Ok(())
    }

    pub fn model(&self, stage: Stage) -> &StageModelRef {
        match stage {
            Stage::Frontal => &self.frontal,
            Stage::Bounding => &self.bounding,
            Stage::Metal => &self.metal,
            Stage::Fracture => &self.fracture,
        }
    }

    pub fn model_mut(&mut self, stage: Stage) -> &mut StageModelRef {
        match stage {
            Stage::Frontal => &mut self.frontal,
            Stage::Bounding => &mut self.bounding,
            Stage::Metal => &mut self.metal,
            Stage::Fracture => &mut self.fracture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    ExcludedNotFrontal,
    ExcludedMetal,
    Analyzed {
        score: f64,
    },
    /// `stage` is a stage name, or `load` when the models could not be loaded.
    Failed {
        stage: String,
        reason: String,
    },
}

/// Per-hip result. Scores are raw logits; a stage's field is present
/// exactly when every earlier gate passed and the stage ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disposition {
    pub image_id: String,
    pub frontal_score: Option<f64>,
    pub bbox: Option<BoundingBox>,
    pub metal_score: Option<f64>,
    pub fracture_score: Option<f64>,
    pub outcome: Outcome,
}

impl Disposition {
    fn pending(image_id: &str) -> Self {
        Disposition {
            image_id: image_id.to_string(),
            frontal_score: None,
            bbox: None,
            metal_score: None,
            fracture_score: None,
            outcome: Outcome::Failed {
                stage: "frontal".into(),
                reason: "not run".into(),
            },
        }
    }

    fn stages_present(&self) -> [bool; 4] {
        [
            self.frontal_score.is_some(),
            self.bbox.is_some(),
            self.metal_score.is_some(),
            self.fracture_score.is_some(),
        ]
    }

    /// Number of stages the outcome says ran.
    fn expected_present(&self) -> Option<usize> {
        Some(match &self.outcome {
            Outcome::ExcludedNotFrontal => 1,
            Outcome::ExcludedMetal => 3,
            Outcome::Analyzed { .. } => 4,
            Outcome::Failed { stage, .. } if stage == "load" => 0,
            Outcome::Failed { stage, .. } => Stage::ALL.iter().position(|s| s.name() == stage)?,
        })
    }

    /// Stage outputs form a prefix that matches the outcome.
    pub fn is_consistent(&self) -> bool {
        let present = self.stages_present();
        let Some(k) = self.expected_present() else {
            return false;
        };
        let prefix = present.iter().enumerate().all(|(i, &p)| p == (i < k));
        let score_matches = match self.outcome {
            Outcome::Analyzed { score } => self.fracture_score == Some(score),
            _ => true,
        };
        prefix && score_matches
    }
}

struct StageModels {
    frontal: Box<dyn StageModel>,
    bounding: Box<dyn StageModel>,
    metal: Box<dyn StageModel>,
    fracture: Box<dyn StageModel>,
}

/// Loaded models plus gate settings. A load failure is kept and reported
/// per hip as `failed(load)`.
pub struct Pipeline {
    config: PipelineConfig,
    models: std::result::Result<StageModels, String>,
}

impl Pipeline {
    pub fn load(
        config: &PipelineConfig,
        registry: &StageRegistry,
        truth: Option<&TruthTable>,
    ) -> Result<Pipeline> {
        config.validate()?;
        let load = |stage: Stage| -> Result<Box<dyn StageModel>> {
            let r = config.model(stage);
            let source = ModelSource {
                checkpoint: r.checkpoint.as_deref(),
                truth,
            };
            registry.load(&r.backend, stage, &source)
        };
        let models = (|| {
            Ok::<_, Error>(StageModels {
                frontal: load(Stage::Frontal)?,
                bounding: load(Stage::Bounding)?,
                metal: load(Stage::Metal)?,
                fracture: load(Stage::Fracture)?,
            })
        })()
        .map_err(|e| e.to_string());
        Ok(Pipeline {
            config: config.clone(),
            models,
        })
    }

    /// Build from already loaded models, listed in pipeline order.
    pub fn from_models(
        config: &PipelineConfig,
        models: [Box<dyn StageModel>; 4],
    ) -> Result<Pipeline> {
        config.validate()?;
        for (m, s) in models.iter().zip(Stage::ALL) {
            if m.stage() != s {
                return Err(Error::invalid(format!(
                    "{} model given in the {} slot",
                    m.stage().name(),
                    s.name()
                )));
            }
        }
        let [frontal, bounding, metal, fracture] = models;
        Ok(Pipeline {
            config: config.clone(),
            models: Ok(StageModels {
                frontal,
                bounding,
                metal,
                fracture,
            }),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn load_error(&self) -> Option<&str> {
        self.models.as_ref().err().map(String::as_str)
    }

    /// Run every hip through the stages in order, short-circuiting on
    /// exclusion or failure.
    pub fn run(&self, hips: &[StageInput<'_>]) -> Vec<Disposition> {
        let mut out: Vec<Disposition> = hips
            .iter()
            .map(|h| Disposition::pending(h.image_id))
            .collect();
        let models = match &self.models {
            Ok(m) => m,
            Err(reason) => {
                for d in &mut out {
                    d.outcome = Outcome::Failed {
                        stage: "load".into(),
                        reason: reason.clone(),
                    };
                }
                return out;
            }
        };
        let cfg = &self.config;
        let all: Vec<usize> = (0..hips.len()).collect();

        let frontal_in: Vec<Image> = all
            .iter()
            .map(|&i| prepare(hips[i].image, models.frontal.as_ref()))
            .collect();
        let mut alive = Vec::new();
        for (i, r) in all
            .iter()
            .zip(run_stage(models.frontal.as_ref(), hips, &all, &frontal_in))
        {
            match r {
                Ok(StageOutput::Logit(s)) if s.is_finite() => {
                    out[*i].frontal_score = Some(s);
                    if frontal_passes(s, cfg.frontal_threshold) {
                        alive.push(*i);
                    } else {
                        out[*i].outcome = Outcome::ExcludedNotFrontal;
                    }
                }
                other => fail(&mut out[*i], Stage::Frontal, other),
            }
        }

        let box_in: Vec<Image> = alive
            .iter()
            .map(|&i| prepare(hips[i].image, models.bounding.as_ref()))
            .collect();
        let mut located = Vec::new();
        for (i, r) in alive
            .iter()
            .zip(run_stage(models.bounding.as_ref(), hips, &alive, &box_in))
        {
            match r {
                Ok(StageOutput::Box(v)) if v.iter().all(|x| x.is_finite()) => {
                    let b = box_from_logits(v);
                    if b.is_valid() {
                        out[*i].bbox = Some(b);
                        located.push(*i);
                    } else {
                        fail(&mut out[*i], Stage::Bounding, Err("degenerate box".into()));
                    }
                }
                other => fail(&mut out[*i], Stage::Bounding, other),
            }
        }

        let rois: Vec<Image> = located
            .iter()
            .map(|&i| {
                crop_roi(
                    hips[i].image,
                    out[i].bbox.as_ref().expect("box set"),
                    cfg.roi_output_size,
                )
            })
            .collect();
        let metal_in: Vec<Image> = rois
            .iter()
            .map(|r| prepare(r, models.metal.as_ref()))
            .collect();
        let mut clean = Vec::new();
        let mut clean_rois = Vec::new();
        for ((i, r), roi) in located
            .iter()
            .zip(run_stage(models.metal.as_ref(), hips, &located, &metal_in))
            .zip(&rois)
        {
            match r {
                Ok(StageOutput::Logit(s)) if s.is_finite() => {
                    out[*i].metal_score = Some(s);
                    if metal_passes(s, cfg.metal_threshold) {
                        clean.push(*i);
                        clean_rois.push(roi);
                    } else {
                        out[*i].outcome = Outcome::ExcludedMetal;
                    }
                }
                other => fail(&mut out[*i], Stage::Metal, other),
            }
        }

        let fracture_in: Vec<Image> = clean_rois
            .iter()
            .map(|r| prepare(r, models.fracture.as_ref()))
            .collect();
        for (i, r) in clean.iter().zip(run_stage(
            models.fracture.as_ref(),
            hips,
            &clean,
            &fracture_in,
        )) {
            match r {
                Ok(StageOutput::Logit(s)) if s.is_finite() => {
                    out[*i].fracture_score = Some(s);
                    out[*i].outcome = Outcome::Analyzed { score: s };
                }
                other => fail(&mut out[*i], Stage::Fracture, other),
            }
        }
        out
    }
}

fn prepare(image: &Image, model: &dyn StageModel) -> Image {
    match model.input_size() {
        Some(s) => fit_input(image, s),
        None => image.clone(),
    }
}

/// One result per index; a failing batch fails each of its items.
fn run_stage(
    model: &dyn StageModel,
    hips: &[StageInput<'_>],
    idx: &[usize],
    images: &[Image],
) -> Vec<std::result::Result<StageOutput, String>> {
    let inputs: Vec<StageInput<'_>> = idx
        .iter()
        .zip(images)
        .map(|(&i, image)| StageInput {
            image_id: hips[i].image_id,
            image,
        })
        .collect();
    let mut results = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        match model.infer(chunk) {
            Ok(v) if v.len() == chunk.len() => results.extend(v.into_iter().map(Ok)),
            Ok(v) => results.extend(
                chunk
                    .iter()
                    .map(|_| Err(format!("model returned {} outputs", v.len()))),
            ),
            Err(e) => results.extend(chunk.iter().map(|_| Err(e.to_string()))),
        }
    }
    results
}

fn fail(d: &mut Disposition, stage: Stage, r: std::result::Result<StageOutput, String>) {
    let reason = match r {
        Err(e) => e,
        Ok(StageOutput::Logit(v)) => format!("non-finite score {v}"),
        Ok(StageOutput::Box(v)) if v.iter().any(|x| !x.is_finite()) => "non-finite box".into(),
        Ok(_) => "unexpected output kind".into(),
    };
    d.outcome = Outcome::Failed {
        stage: stage.name().into(),
        reason,
    };
}

/// Dispositions for both hips of a case.
pub fn run_pipeline(case: &Case, images: &[Image; 2], pipeline: &Pipeline) -> Vec<Disposition> {
    let inputs: Vec<StageInput<'_>> = case
        .hips
        .iter()
        .zip(images)
        .map(|(h, image)| StageInput {
            image_id: &h.image_id,
            image,
        })
        .collect();
    pipeline.run(&inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomSpec, SplitCounts, View};
    use crate::raster::Point;

    struct FixedLogit(Stage, f64, usize);

    impl StageModel for FixedLogit {
        fn stage(&self) -> Stage {
            self.0
        }
        fn input_size(&self) -> Option<usize> {
            Some(self.2)
        }
        fn infer(&self, inputs: &[StageInput<'_>]) -> Result<Vec<StageOutput>> {
            Ok(inputs.iter().map(|_| StageOutput::Logit(self.1)).collect())
        }
    }

    fn input(image: &Image) -> StageInput<'_> {
        StageInput {
            image_id: "C00000-L",
            image,
        }
    }

    #[test]
    fn gate_threshold_rule() {
        let img = Image::filled(4, 4, 0.0);
        assert!(
            gate_frontal(&input(&img), &FixedLogit(Stage::Frontal, 4.0, 4), 0.5)
                .unwrap()
                .1
        );
        assert!(
            !gate_frontal(&input(&img), &FixedLogit(Stage::Frontal, -4.0, 4), 0.5)
                .unwrap()
                .1
        );
        assert!(
            gate_metal(&input(&img), &FixedLogit(Stage::Metal, -4.0, 4), 0.5)
                .unwrap()
                .1
        );
        assert!(
            !gate_metal(&input(&img), &FixedLogit(Stage::Metal, 4.0, 4), 0.5)
                .unwrap()
                .1
        );
        assert!(gate_frontal(&input(&img), &FixedLogit(Stage::Frontal, 4.0, 8), 0.5).is_err());
        assert!(gate_frontal(&input(&img), &FixedLogit(Stage::Frontal, 4.0, 4), 1.0).is_err());
    }

    #[test]
    fn full_box_crop_is_identity() {
        let img = Image::new(6, 6, (0..36).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        assert_eq!(crop_roi(&img, &BoundingBox::FULL, 6), img);
    }

    #[test]
    fn crop_past_the_edge_stays_in_bounds() {
        let img = Image::filled(10, 10, 0.5);
        let b = BoundingBox {
            center_x: 0.98,
            center_y: 0.02,
            width: 0.6,
            height: 0.3,
        };
        let roi = crop_roi_with(10, 10, &b, 16, |x, y| {
            assert!(x < 10 && y < 10);
            img.get(x, y)
        });
        assert!(roi.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn landmark_on_edge_is_adequate() {
        let lm = Landmarks {
            femoral_head: Point { x: 32.0, y: 32.0 },
            greater_trochanter: Point { x: 64.0, y: 48.0 },
            lesser_trochanter: Point { x: 48.0, y: 64.0 },
        };
        let b = BoundingBox::from_pixel_edges(32.0, 32.0, 64.0, 64.0, 128, 128);
        assert!(check_adequacy(&b, &lm, 128, 128));
        assert!(check_adequacy(&BoundingBox::FULL, &lm, 128, 128));
        let tight = BoundingBox::from_pixel_edges(33.0, 32.0, 64.0, 64.0, 128, 128);
        assert!(!check_adequacy(&tight, &lm, 128, 128));
    }

    #[test]
    fn oracle_pipeline_matches_truth() {
        let spec = PhantomSpec {
            image_size: 64,
            ..PhantomSpec::default()
        };
        let counts = SplitCounts {
            train: 0,
            val: 0,
            test: 120,
        };
        let ds = generate_dataset(&spec, &counts).unwrap();
        let truth = TruthTable::from_dataset(&ds);
        let cfg = PipelineConfig {
            frontal: StageModelRef::oracle(),
            bounding: StageModelRef::oracle(),
            metal: StageModelRef::oracle(),
            fracture: StageModelRef::oracle(),
            ..PipelineConfig::default()
        };
        let p = Pipeline::load(&cfg, &StageRegistry::default(), Some(&truth)).unwrap();
        assert!(p.load_error().is_none());
        for (case, imgs) in ds.cases.iter().zip(&ds.images) {
            for (d, hip) in run_pipeline(case, imgs, &p).iter().zip(&case.hips) {
                assert!(d.is_consistent(), "{d:?}");
                let want = match (case.view, hip.metal, hip.fracture) {
                    (View::Lateral, ..) => Outcome::ExcludedNotFrontal,
                    (_, true, _) => Outcome::ExcludedMetal,
                    (_, _, f) => Outcome::Analyzed {
                        score: if f { ORACLE_LOGIT } else { -ORACLE_LOGIT },
                    },
                };
                assert_eq!(d.outcome, want);
            }
        }
    }

    #[test]
    fn missing_checkpoint_fails_every_hip_at_load() {
        let p =
            Pipeline::load(&PipelineConfig::default(), &StageRegistry::default(), None).unwrap();
        let img = Image::filled(8, 8, 0.0);
        let d = p.run(&[input(&img)]);
        assert!(matches!(&d[0].outcome, Outcome::Failed { stage, .. } if stage == "load"));
        assert!(d[0].is_consistent());
    }
}
