use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::HeadKind;
use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::network::{batch_tensor, HeadNodes, Network};
use crate::augment::{AugmentConfig, Augmenter};
use crate::error::{Error, Result};
use crate::metrics::roc_curve;
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Mode, NodeId, Scalar};

/// Supervision for one image, matching the network's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Presence(bool),
    /// Presence plus location class (0 none, 1 intra, 2 extra); `None`
    /// leaves the sample out of the location loss.
    PresenceLocation {
        presence: bool,
        location: Option<usize>,
    },
    /// Normalised `(cx, cy, w, h)`.
    Box([f64; 4]),
}

impl Target {
    pub fn presence(&self) -> Option<bool> {
        match *self {
            Target::Presence(p) | Target::PresenceLocation { presence: p, .. } => Some(p),
            Target::Box(_) => None,
        }
    }

    fn fits(&self, head: HeadKind) -> bool {
        matches!(
            (self, head),
            (Target::Presence(_), HeadKind::Binary)
                | (Target::PresenceLocation { .. }, HeadKind::BinaryPlus3Class)
                | (Target::Box(_), HeadKind::Regression4)
        )
    }
}

/// One training image at the network's input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Vec<f32>,
    pub target: Target,
}

/// Per-image stochastic transform applied to training batches only.
pub trait SampleTransform {
    fn transform(&self, image: &[f32], size: usize, rng: &mut dyn RngCore) -> Vec<f32>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub leak: f64,
    pub secondary_loss_weight: f64,
    /// `None` trains on the raw images.
    pub augmentation: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            epochs: 25,
            batch_size: 14,
            dropout_rate: 0.2,
            weight_decay: 1e-5,
            leak: 0.5,
            secondary_loss_weight: 1.0,
            augmentation: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(what.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return bad("leak must lie in [0, 1]");
        }
        if !(self.secondary_loss_weight >= 0.0) {
            return bad("secondary_loss_weight must be >= 0");
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serialises"),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Epoch index to continue from when resuming a checkpoint.
    pub start_epoch: usize,
    pub stage: Option<String>,
    pub dataset_hash: Option<String>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// `primary + weight · secondary`.
pub fn combined_loss(primary: f64, secondary: f64, weight: f64) -> f64 {
    primary + weight * secondary
}

/// Loss node for one batch: BCE on presence, plus weighted softmax CE on
/// location for dual heads; sigmoid-squashed MSE for box regression.
pub fn head_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &HeadNodes,
    targets: &[&Target],
    secondary_weight: f64,
) -> Result<NodeId> {
    if let Some(bbox) = heads.bbox {
        let mut flat = Vec::with_capacity(targets.len() * 4);
        for t in targets {
            match t {
                Target::Box(b) => flat.extend_from_slice(b),
                _ => return Err(Error::invalid("box head needs box targets")),
            }
        }
        let squashed = g.sigmoid(bbox)?;
        return g.mse(squashed, &flat);
    }
    let presence = heads
        .presence
        .ok_or_else(|| Error::invalid("network has no presence head"))?;
    let y: Vec<f64> = targets
        .iter()
        .map(|t| t.presence().map(|p| p as u8 as f64))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::invalid("presence head needs presence targets"))?;
    let primary = g.bce_with_logits(presence, &y)?;
    match heads.location {
        Some(loc) if secondary_weight > 0.0 => {
            let classes: Vec<Option<usize>> = targets
                .iter()
                .map(|t| match t {
                    Target::PresenceLocation { location, .. } => *location,
                    _ => None,
                })
                .collect();
            let secondary = g.softmax_cross_entropy_masked(loc, &classes)?;
            let weighted = g.scale(secondary, secondary_weight)?;
            g.add(primary, weighted)
        }
        _ => Ok(primary),
    }
}

const EVAL_BATCH: usize = 64;
const CALIBRATION_BATCH: usize = 64;

/// Eval-mode mean loss and per-sample scores (presence logits, or nothing
/// for box heads).
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[Sample],
    secondary_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let size = net.input_size();
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let x = batch_tensor::<T>(&images, size)?;
        let out = net.predict(&x)?;
        let mut g = Graph::new();
        let nodes = HeadNodes {
            presence: out.presence.clone().map(|t| g.input(t)),
            location: out.location.map(|t| g.input(t)),
            bbox: out.bbox.map(|t| g.input(t)),
        };
        let targets: Vec<&Target> = chunk.iter().map(|s| &s.target).collect();
        let loss = head_loss(&mut g, &nodes, &targets, secondary_weight)?;
        total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        if let Some(p) = out.presence {
            scores.extend(p.to_f64_vec());
        }
    }
    Ok((total / samples.len().max(1) as f64, scores))
}

/// Mini-batch Adam training. Deterministic in the seed; returns the
/// per-epoch log and a checkpoint of the final weights.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainingConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let head = net.spec().arch.head;
    let size = net.input_size();
    for s in train_set.iter().chain(val_set) {
        if !s.target.fits(head) {
            return Err(Error::data(format!(
                "sample {} has a target unsuited to a {head:?} head",
                s.id
            )));
        }
        if s.image.len() != size * size {
            return Err(Error::shape(format!(
                "sample {} has {} pixels, network expects {size}×{size}",
                s.id,
                s.image.len()
            )));
        }
    }
    let augmenter = match &cfg.augmentation {
        Some(a) if !a.is_identity() => {
            let pool: Vec<&[f32]> = train_set.iter().map(|s| s.image.as_slice()).collect();
            Some(Augmenter::new(a.clone(), &pool, size))
        }
        _ => None,
    };
    let mut adam = AdamState::new(net.params(), cfg.adam());
    let mut history = Vec::with_capacity(cfg.epochs);
    let w = cfg.secondary_loss_weight;

    for epoch in opts.start_epoch..opts.start_epoch + cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng::shuffle(
            &mut rng::stream(cfg.seed, &[rng::tag("epoch-order"), e]),
            &mut order,
        );
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut aug_rng = rng::stream(cfg.seed, &[rng::tag("augment"), e, b as u64]);
            let transformed: Vec<Vec<f32>>;
            let images: Vec<&[f32]> = match &augmenter {
                Some(a) => {
                    transformed = idx
                        .iter()
                        .map(|&i| a.transform(&train_set[i].image, size, &mut aug_rng))
                        .collect();
                    transformed.iter().map(Vec::as_slice).collect()
                }
                None => idx.iter().map(|&i| train_set[i].image.as_slice()).collect(),
            };
            let x = batch_tensor::<T>(&images, size)?;
            let targets: Vec<&Target> = idx.iter().map(|&i| &train_set[i].target).collect();

            let mut g = Graph::new();
            let input = g.input(x);
            let mut drop_rng = rng::stream(cfg.seed, &[rng::tag("dropout"), e, b as u64]);
            let heads = net.forward(&mut g, input, Mode::Train, &mut drop_rng)?;
            let loss = head_loss(&mut g, &heads, &targets, w)?;
            let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {value} at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += value * idx.len() as f64;
            let grads = g.backward(loss)?;
            net.params_mut().zero_grad();
            grads.accumulate_into(net.params_mut())?;
            adam_step(net.params_mut(), &mut adam)?;
        }
        // running averages lag the weights; evaluate with population statistics
        let plain: Vec<&[f32]> = train_set.iter().map(|s| s.image.as_slice()).collect();
        net.recalibrate_batch_norm(&plain, CALIBRATION_BATCH)?;
        let (val_loss, val_auc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (loss, scores) = evaluate(net, val_set, w)?;
            let labels: Vec<bool> = val_set.iter().filter_map(|s| s.target.presence()).collect();
            let auc = if scores.len() == labels.len() {
                roc_curve(&scores, &labels).ok().map(|c| c.auc)
            } else {
                None
            };
            (Some(loss), auc)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_auc,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    let metadata = TrainingMetadata {
        stage: opts.stage.clone(),
        epoch: opts.start_epoch + cfg.epochs,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash(),
        dataset_hash: opts.dataset_hash.clone(),
    };
    Ok(TrainReport {
        history,
        checkpoint: Checkpoint::from_network(net, metadata),
    })
}
