//! Stage models behind a name-keyed backend registry: trained CNNs loaded
//! from checkpoints, and an oracle stub that answers from ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::Stage;
use crate::error::{Error, Result};
use crate::nnet::{batch_tensor, load_checkpoint, Checkpoint, HeadKind, Network};
use crate::phantom::{Dataset, View};
use crate::raster::{BoundingBox, Image};

/// One image handed to a stage model. The id is only read by stubs.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub image_id: &'a str,
    pub image: &'a Image,
}

/// Raw model output: a presence logit or four pre-sigmoid box values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StageOutput {
    Logit(f64),
    Box([f64; 4]),
}

pub trait StageModel: Send + Sync {
    fn stage(&self) -> Stage;
    /// Side length the model expects, or `None` if it takes any size.
    fn input_size(&self) -> Option<usize>;
    fn infer(&self, inputs: &[StageInput<'_>]) -> Result<Vec<StageOutput>>;
}

/// What a backend may draw on when loading a stage model.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelSource<'a> {
    pub checkpoint: Option<&'a Path>,
    pub truth: Option<&'a TruthTable>,
}

pub trait StageBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn load(&self, stage: Stage, source: &ModelSource<'_>) -> Result<Box<dyn StageModel>>;
}

pub struct StageRegistry {
    entries: BTreeMap<&'static str, Box<dyn StageBackend>>,
}

impl StageRegistry {
    pub fn empty() -> Self {
        StageRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, backend: Box<dyn StageBackend>) {
        self.entries.insert(backend.name(), backend);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn StageBackend> {
        self.entries
            .get(name)
            .map(Box::as_ref)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "stage model backend",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn load(
        &self,
        name: &str,
        stage: Stage,
        source: &ModelSource<'_>,
    ) -> Result<Box<dyn StageModel>> {
        self.get(name)?.load(stage, source)
    }
}

impl Default for StageRegistry {
    fn default() -> Self {
        let mut r = StageRegistry::empty();
        r.register(Box::new(CnnBackend));
        r.register(Box::new(OracleBackend));
        r
    }
}

const INFER_BATCH: usize = 64;

/// A trained network serving one stage.
pub struct CnnStage {
    stage: Stage,
    net: Network<f32>,
}

impl CnnStage {
    pub fn new(stage: Stage, net: Network<f32>) -> Result<Self> {
        let head = net.spec().arch.head;
        if !stage.accepts_head(head) {
            return Err(Error::Checkpoint(format!(
                "{} stage cannot use a {head:?} network",
                stage.name()
            )));
        }
        Ok(CnnStage { stage, net })
    }

    pub fn from_checkpoint(stage: Stage, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.metadata.stage.as_deref() != Some(stage.name()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for stage {:?}, not {}",
                ckpt.header.metadata.stage,
                stage.name()
            )));
        }
        CnnStage::new(stage, ckpt.network()?)
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }
}

impl StageModel for CnnStage {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.net.input_size())
    }

    fn infer(&self, inputs: &[StageInput<'_>]) -> Result<Vec<StageOutput>> {
        let size = self.net.input_size();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_BATCH) {
            for i in chunk {
                if i.image.width != size || i.image.height != size {
                    return Err(Error::shape(format!(
                        "{} stage expects {size}×{size} input, {} is {}×{}",
                        self.stage.name(),
                        i.image_id,
                        i.image.width,
                        i.image.height
                    )));
                }
            }
            let images: Vec<&[f32]> = chunk.iter().map(|i| i.image.data.as_slice()).collect();
            let heads = self.net.predict(&batch_tensor::<f32>(&images, size)?)?;
            if self.net.spec().arch.head == HeadKind::Regression4 {
                let b = heads.bbox.expect("box head").to_f64_vec();
                out.extend(
                    b.chunks(4)
                        .map(|c| StageOutput::Box([c[0], c[1], c[2], c[3]])),
                );
            } else {
                let p = heads.presence.expect("presence head").to_f64_vec();
                out.extend(p.into_iter().map(StageOutput::Logit));
            }
        }
        Ok(out)
    }
}

pub struct CnnBackend;

impl StageBackend for CnnBackend {
    fn name(&self) -> &'static str {
        "cnn"
    }

    fn load(&self, stage: Stage, source: &ModelSource<'_>) -> Result<Box<dyn StageModel>> {
        let path = source.checkpoint.ok_or_else(|| {
            Error::Checkpoint(format!(
                "no checkpoint given for the {} stage",
                stage.name()
            ))
        })?;
        let ckpt = load_checkpoint(path)?;
        Ok(Box::new(CnnStage::from_checkpoint(stage, &ckpt)?))
    }
}

/// Ground truth the oracle stub answers from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HipTruth {
    pub frontal: bool,
    pub metal: bool,
    pub fracture: bool,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub entries: BTreeMap<String, HipTruth>,
}

impl TruthTable {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let entries = ds
            .hips()
            .map(|(c, h, _)| {
                (
                    h.image_id.clone(),
                    HipTruth {
                        frontal: c.view == View::Frontal,
                        metal: h.metal,
                        fracture: h.fracture,
                        bbox: h.true_bbox,
                    },
                )
            })
            .collect();
        TruthTable { entries }
    }
}

/// Logit magnitude the oracle stub emits for a confident yes or no.
pub const ORACLE_LOGIT: f64 = 8.0;

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Emits ground truth for every stage; used to test orchestration.
pub struct OracleStage {
    stage: Stage,
    truth: TruthTable,
}

impl OracleStage {
    pub fn new(stage: Stage, truth: TruthTable) -> Self {
        OracleStage { stage, truth }
    }
}

impl StageModel for OracleStage {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn input_size(&self) -> Option<usize> {
        None
    }

    fn infer(&self, inputs: &[StageInput<'_>]) -> Result<Vec<StageOutput>> {
        let yes_no = |b: bool| StageOutput::Logit(if b { ORACLE_LOGIT } else { -ORACLE_LOGIT });
        inputs
            .iter()
            .map(|i| {
                let t = self.truth.entries.get(i.image_id).ok_or_else(|| {
                    Error::data(format!("oracle has no truth for {}", i.image_id))
                })?;
                Ok(match self.stage {
                    Stage::Frontal => yes_no(t.frontal),
                    Stage::Metal => yes_no(t.metal),
                    Stage::Fracture => yes_no(t.fracture),
                    Stage::Bounding => StageOutput::Box(t.bbox.as_array().map(logit)),
                })
            })
            .collect()
    }
}

pub struct OracleBackend;

impl StageBackend for OracleBackend {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn load(&self, stage: Stage, source: &ModelSource<'_>) -> Result<Box<dyn StageModel>> {
        let truth = source
            .truth
            .ok_or_else(|| Error::invalid("the oracle backend needs a ground-truth table"))?;
        Ok(Box::new(OracleStage::new(stage, truth.clone())))
    }
}
