use serde::{Deserialize, Serialize};

use super::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::roc_curve;
use crate::nnet::{evaluate, train, Network, NetworkSpec, Sample, TrainOptions, TrainingConfig};

/// Which augmentation techniques are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TechniqueMask {
    pub translation: bool,
    pub rotation: bool,
    pub shear: bool,
    pub histogram: bool,
}

impl TechniqueMask {
    pub const NONE: TechniqueMask = TechniqueMask {
        translation: false,
        rotation: false,
        shear: false,
        histogram: false,
    };
    pub const ALL: TechniqueMask = TechniqueMask {
        translation: true,
        rotation: true,
        shear: true,
        histogram: true,
    };

    /// All-off, all-on, then each technique alone.
    pub fn standard_set() -> Vec<TechniqueMask> {
        let only = |f: fn(&mut TechniqueMask)| {
            let mut m = TechniqueMask::NONE;
            f(&mut m);
            m
        };
        vec![
            TechniqueMask::NONE,
            TechniqueMask::ALL,
            only(|m| m.translation = true),
            only(|m| m.rotation = true),
            only(|m| m.shear = true),
            only(|m| m.histogram = true),
        ]
    }

    pub fn apply(&self, base: &AugmentConfig) -> AugmentConfig {
        AugmentConfig {
            max_translation_fraction: if self.translation {
                base.max_translation_fraction
            } else {
                0.0
            },
            max_rotation_degrees: if self.rotation {
                base.max_rotation_degrees
            } else {
                0.0
            },
            max_shear_degrees: if self.shear {
                base.max_shear_degrees
            } else {
                0.0
            },
            histogram_match_enabled: self.histogram && base.histogram_match_enabled,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.translation, "translation"),
            (self.rotation, "rotation"),
            (self.shear, "shear"),
            (self.histogram, "histogram"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: TechniqueMask,
    pub label: String,
    /// Validation AUC of the final epoch, one per seed.
    pub aucs: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mask: TechniqueMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }
}

/// Train one model per (mask, seed) under an otherwise fixed protocol and
/// report validation AUC.
pub fn ablation_run(
    spec: &NetworkSpec,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainingConfig,
    masks: &[TechniqueMask],
    seeds: &[u64],
) -> Result<AblationTable> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::data(
            "ablation needs non-empty training and validation sets",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let base = config.augmentation.clone().unwrap_or_default();
    let labels: Vec<bool> = val_set
        .iter()
        .map(|s| s.target.presence())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::invalid("ablation needs presence targets"))?;
    let mut rows = Vec::with_capacity(masks.len());
    for &mask in masks {
        let mut aucs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainingConfig {
                augmentation: Some(AugmentConfig {
                    seed,
                    ..mask.apply(&base)
                }),
                seed,
                ..config.clone()
            };
            let mut net = Network::<f32>::init(spec.clone(), seed);
            train(&mut net, train_set, &[], &cfg, TrainOptions::default())?;
            let (_, scores) = evaluate(&net, val_set, cfg.secondary_loss_weight)?;
            aucs.push(roc_curve(&scores, &labels)?.auc);
        }
        rows.push(AblationRow {
            mask,
            label: mask.label(),
            mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            aucs,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
