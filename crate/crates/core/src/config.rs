//! The single JSON document that configures a run.

use std::path::PathBuf;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::labelloop::LoopConfig;
use crate::nnet::{build_network, ArchConfig, NetworkSpec, TrainingConfig};
use crate::phantom::{NoiseConfig, NoiseMode, PhantomSpec, Split, SplitCounts};
use crate::pipeline::{PipelineConfig, Stage};
use crate::rng;

/// Version of every JSON schema written or served.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Network and training hyperparameters of one stage. The training
/// config's dropout and leak override the architecture's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSetup {
    pub arch: ArchConfig,
    pub training: TrainingConfig,
}

impl StageSetup {
    /// Desk-scale defaults that train each stage in minutes on one core.
    pub fn preset(stage: Stage) -> Self {
        let base = TrainingConfig {
            learning_rate: 1e-3,
            dropout_rate: 0.0,
            ..TrainingConfig::default()
        };
        let (arch, training) = match stage {
            Stage::Frontal => (stage.default_arch(), TrainingConfig { epochs: 3, ..base }),
            Stage::Bounding => (
                stage.default_arch(),
                TrainingConfig {
                    epochs: 8,
                    // geometric augmentation would move the target box
                    augmentation: Some(AugmentConfig {
                        max_translation_fraction: 0.0,
                        max_rotation_degrees: 0.0,
                        max_shear_degrees: 0.0,
                        ..AugmentConfig::default()
                    }),
                    ..base
                },
            ),
            Stage::Metal => (
                stage.default_arch(),
                TrainingConfig {
                    epochs: 4,
                    // matching to implant-free references erases the implant's brightness
                    augmentation: Some(AugmentConfig {
                        histogram_match_enabled: false,
                        ..AugmentConfig::default()
                    }),
                    ..base
                },
            ),
            Stage::Fracture => (
                ArchConfig {
                    depth: 10,
                    growth_rate: 8,
                    stem_channels: 16,
                    stem_stride: 2,
                    ..ArchConfig::desk_fracture()
                },
                TrainingConfig {
                    epochs: 6,
                    dropout_rate: 0.2,
                    ..base
                },
            ),
        };
        StageSetup { arch, training }
    }

    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            dropout_rate: self.training.dropout_rate,
            leak: self.training.leak,
            ..self.arch.clone()
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        build_network(&self.effective_arch())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePresets {
    pub frontal: StageSetup,
    pub bounding: StageSetup,
    pub metal: StageSetup,
    pub fracture: StageSetup,
}

impl Default for StagePresets {
    fn default() -> Self {
        StagePresets {
            frontal: StageSetup::preset(Stage::Frontal),
            bounding: StageSetup::preset(Stage::Bounding),
            metal: StageSetup::preset(Stage::Metal),
            fracture: StageSetup::preset(Stage::Fracture),
        }
    }
}

impl StagePresets {
    pub fn get(&self, stage: Stage) -> &StageSetup {
        match stage {
            Stage::Frontal => &self.frontal,
            Stage::Bounding => &self.bounding,
            Stage::Metal => &self.metal,
            Stage::Fracture => &self.fracture,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageSetup {
        match stage {
            Stage::Frontal => &mut self.frontal,
            Stage::Bounding => &mut self.bounding,
            Stage::Metal => &mut self.metal,
            Stage::Fracture => &mut self.fracture,
        }
    }
}

/// Initial label noise applied at generation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelNoise {
    pub miss_rate: f64,
    /// When set, the false-positive rate is solved for this accuracy at the
    /// population's prevalence and `false_positive_rate` is ignored.
    pub target_accuracy: Option<f64>,
    pub false_positive_rate: f64,
    pub mode: NoiseMode,
    pub splits: Vec<Split>,
}

impl Default for LabelNoise {
    fn default() -> Self {
        LabelNoise {
            miss_rate: 0.25,
            target_accuracy: Some(0.95),
            false_positive_rate: 0.01,
            mode: NoiseMode::ExactCount,
            splits: vec![Split::Train, Split::Val],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Two-sided interval level is `1 - alpha`.
    pub alpha: f64,
    pub high_precision_target: f64,
    pub high_recall_target: f64,
    pub balanced_seed: u64,
    /// Minimum implant-gate precision when tuning its threshold.
    pub metal_min_precision: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            high_precision_target: 0.97,
            high_recall_target: 0.95,
            balanced_seed: 0,
            metal_min_precision: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed, mixed into every component's own seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub phantom: PhantomSpec,
    pub splits: SplitCounts,
    /// `None` keeps generated labels equal to the truth.
    pub noise: Option<LabelNoise>,
    pub stages: StagePresets,
    pub pipeline: PipelineConfig,
    pub label_loop: LoopConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("hipline-out"),
            precision: Precision::F32,
            phantom: PhantomSpec::default(),
            splits: SplitCounts::default(),
            noise: None,
            stages: StagePresets::default(),
            pipeline: PipelineConfig::default(),
            label_loop: LoopConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Strict parse: unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        for stage in Stage::ALL {
            let s = self.stages.get(stage);
            s.training.validate()?;
            s.effective_arch().validate()?;
            if !stage.accepts_head(s.arch.head) {
                return Err(Error::invalid(format!(
                    "{} stage cannot use a {:?} head",
                    stage.name(),
                    s.arch.head
                )));
            }
        }
        self.pipeline.validate()?;
        self.label_loop.validate()?;
        let e = &self.evaluation;
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::invalid("evaluation.alpha must lie in (0, 1)"));
        }
        for (name, v) in [
            ("high_precision_target", e.high_precision_target),
            ("high_recall_target", e.high_recall_target),
            ("metal_min_precision", e.metal_min_precision),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!(
                    "evaluation.{name} must lie in (0, 1]"
                )));
            }
        }
        if let Some(n) = &self.noise {
            if let Some(t) = n.target_accuracy {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(Error::invalid("noise.target_accuracy must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON snapshot. The output directory is left
    /// out so a run reproduces wherever it is written.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(
            serde_json::to_vec(&v).expect("config serialises"),
        ))
    }

    fn derive(&self, component: &str, own: u64) -> u64 {
        rng::stream(self.seed, &[rng::tag(component), own]).next_u64()
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.derive("phantom", self.phantom.seed),
            ..self.phantom.clone()
        }
    }

    /// Stage setup with seeds mixed with the master seed.
    pub fn stage(&self, stage: Stage) -> StageSetup {
        let mut s = self.stages.get(stage).clone();
        s.training.seed = self.derive(stage.name(), s.training.seed);
        if let Some(a) = &mut s.training.augmentation {
            a.seed = self.derive("augment", a.seed ^ s.training.seed);
        }
        s
    }

    /// Concrete noise settings for a population of the given prevalence.
    pub fn noise_config(&self, prevalence: f64) -> Result<Option<NoiseConfig>> {
        let Some(n) = &self.noise else {
            return Ok(None);
        };
        let fp = match n.target_accuracy {
            Some(t) => {
                crate::phantom::false_positive_rate_for_accuracy(prevalence, n.miss_rate, t)?
            }
            None => n.false_positive_rate,
        };
        Ok(Some(NoiseConfig {
            miss_rate: n.miss_rate,
            false_positive_rate: fp,
            mode: n.mode,
            splits: n.splits.clone(),
            eligible_only: true,
            seed: self.derive("noise", 0),
        }))
    }
}
