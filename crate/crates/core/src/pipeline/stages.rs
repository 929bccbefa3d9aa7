//! The four pipeline stages and the supervised samples each is trained on.

use serde::{Deserialize, Serialize};

use super::{crop_roi, fit_input};
use crate::error::{Error, Result};
use crate::nnet::{ArchConfig, HeadKind, Sample, Target};
use crate::phantom::{Dataset, Split, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Frontal,
    Bounding,
    Metal,
    Fracture,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 4] = [
        Stage::Frontal,
        Stage::Bounding,
        Stage::Metal,
        Stage::Fracture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Frontal => "frontal",
            Stage::Bounding => "bounding",
            Stage::Metal => "metal",
            Stage::Fracture => "fracture",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "stage",
                name: name.to_string(),
                known: Stage::ALL.map(Stage::name).join(", "),
            })
    }

    pub fn accepts_head(self, head: HeadKind) -> bool {
        match self {
            Stage::Frontal | Stage::Metal => head == HeadKind::Binary,
            Stage::Bounding => head == HeadKind::Regression4,
            Stage::Fracture => matches!(head, HeadKind::Binary | HeadKind::BinaryPlus3Class),
        }
    }

    /// Whether the stage sees the ROI crop rather than the whole image.
    pub fn uses_roi(self) -> bool {
        matches!(self, Stage::Metal | Stage::Fracture)
    }

    /// Desk-scale network for the stage.
    pub fn default_arch(self) -> ArchConfig {
        match self {
            Stage::Frontal => ArchConfig::plain(4, 8, 8, HeadKind::Binary, 32),
            Stage::Bounding => ArchConfig::plain(4, 16, 8, HeadKind::Regression4, 64),
            Stage::Metal => ArchConfig {
                depth: 7,
                growth_rate: 8,
                stem_channels: 8,
                head: HeadKind::Binary,
                input_size: 32,
                dropout_rate: 0.0,
                ..ArchConfig::desk_fracture()
            },
            Stage::Fracture => ArchConfig::desk_fracture(),
        }
    }
}

/// Training or evaluation samples for one stage, drawn from `split`.
///
/// Frontal: every hip, labelled by view. Bounding: frontal hips with their
/// true box. Metal: frontal hips, ROI crop from the true box, labelled by
/// implant. Fracture: frontal implant-free hips, ROI crop, current label.
pub fn stage_samples(
    ds: &Dataset,
    stage: Stage,
    split: Split,
    input_size: usize,
    roi_size: usize,
) -> Result<Vec<Sample>> {
    if input_size == 0 || roi_size == 0 {
        return Err(Error::invalid("input and ROI sizes must be positive"));
    }
    let mut out = Vec::new();
    for (case, hip, image) in ds.hips_in(split) {
        let frontal = case.view == View::Frontal;
        let target = match stage {
            Stage::Frontal => Target::Presence(frontal),
            Stage::Bounding if frontal => Target::Box(hip.true_bbox.as_array()),
            Stage::Metal if frontal => Target::Presence(hip.metal),
            Stage::Fracture if hip.fracture_eligible(case.view) => Target::PresenceLocation {
                presence: hip.label.fracture,
                location: hip.label.location.map(|l| l.class_index()),
            },
            _ => continue,
        };
        let source = if stage.uses_roi() {
            crop_roi(image, &hip.true_bbox, roi_size)
        } else {
            image.clone()
        };
        out.push(Sample {
            id: hip.image_id.clone(),
            image: fit_input(&source, input_size).data,
            target,
        });
    }
    Ok(out)
}

/// Binary targets reduced to a presence-only head when the network has no
/// location output.
pub fn presence_only(samples: Vec<Sample>) -> Vec<Sample> {
    samples
        .into_iter()
        .map(|s| match s.target {
            Target::PresenceLocation { presence, .. } => Sample {
                target: Target::Presence(presence),
                ..s
            },
            _ => s,
        })
        .collect()
}
