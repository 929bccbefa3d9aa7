//! Iterative label cleaning: train on the current labels, queue model/label
//! disagreements, adjudicate, relabel and retrain.

mod review;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use review::{
    enumerate_discrepancies, ConfirmAllReviewer, Decision, ExternalReviewer, OracleReviewer,
    QueueKind, ReviewItem, ReviewStatus, Reviewer, ReviewerRegistry,
};

use crate::error::{Error, Result};
use crate::metrics::{pick_operating_point, roc_curve, OperatingMode};
use crate::nnet::{
    build_network, evaluate, train, ArchConfig, Network, Sample, Target, TrainOptions,
    TrainingConfig,
};
use crate::phantom::{
    Dataset, FractureLabel, FractureLocation, LabelProvenance, LabelSource, Split,
};
use crate::pipeline::{crop_roi, fit_input};

pub type LabelStore = BTreeMap<String, FractureLabel>;

/// One image of the cleaning population, prepared at model input size.
/// Carries no label and no truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopImage {
    pub image_id: String,
    pub split: Split,
    pub image: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub input_size: usize,
    pub images: Vec<LoopImage>,
}

impl Population {
    /// Fracture-eligible hips of `splits`, ROI-cropped from the true box,
    /// plus their current labels.
    pub fn from_dataset(
        ds: &Dataset,
        splits: &[Split],
        input_size: usize,
        roi_size: usize,
    ) -> Result<(Self, LabelStore)> {
        let mut images = Vec::new();
        let mut labels = LabelStore::new();
        for (case, hip, image) in ds.hips() {
            if !splits.contains(&case.split) || !hip.fracture_eligible(case.view) {
                continue;
            }
            let roi = crop_roi(image, &hip.true_bbox, roi_size);
            images.push(LoopImage {
                image_id: hip.image_id.clone(),
                split: case.split,
                image: fit_input(&roi, input_size).data,
            });
            labels.insert(hip.image_id.clone(), hip.label);
        }
        if images.is_empty() {
            return Err(Error::data("label cleaning population is empty"));
        }
        Ok((Population { input_size, images }, labels))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.image_id.clone()).collect()
    }

    /// Samples of one split under the given labels.
    pub fn samples(&self, labels: &LabelStore, split: Split) -> Result<Vec<Sample>> {
        self.images
            .iter()
            .filter(|i| i.split == split)
            .map(|i| {
                let l = labels
                    .get(&i.image_id)
                    .ok_or_else(|| Error::data(format!("no label for {}", i.image_id)))?;
                Ok(Sample {
                    id: i.image_id.clone(),
                    image: i.image.clone(),
                    target: Target::PresenceLocation {
                        presence: l.fracture,
                        location: l.location.map(FractureLocation::class_index),
                    },
                })
            })
            .collect()
    }
}

/// Hidden fracture truth for audits and the oracle reviewer.
pub fn hidden_truth(ds: &Dataset, ids: &[String]) -> BTreeMap<String, bool> {
    ids.iter()
        .filter_map(|id| ds.hip(id).map(|(_, h, _)| (id.clone(), h.fracture)))
        .collect()
}

/// Write cleaned labels back into the dataset records.
pub fn apply_labels(ds: &mut Dataset, labels: &LabelStore) -> Result<()> {
    for (id, l) in labels {
        let (c, h) = ds
            .locate(id)
            .ok_or_else(|| Error::data(format!("label for unknown image {id}")))?;
        ds.cases[c].hips[h].label = *l;
    }
    Ok(())
}

/// Trains a model on the current labels and scores the whole population.
pub trait RoundScorer {
    fn score(
        &mut self,
        population: &Population,
        labels: &LabelStore,
        round: u32,
    ) -> Result<Vec<f64>>;
}

/// Fresh network per round, trained on the training split.
#[derive(Clone, Debug)]
pub struct CnnScorer {
    pub arch: ArchConfig,
    pub training: TrainingConfig,
}

impl RoundScorer for CnnScorer {
    fn score(
        &mut self,
        population: &Population,
        labels: &LabelStore,
        _round: u32,
    ) -> Result<Vec<f64>> {
        let spec = build_network(&self.arch)?;
        if spec.arch.input_size != population.input_size {
            return Err(Error::shape(format!(
                "scorer expects {} px input, population is {} px",
                spec.arch.input_size, population.input_size
            )));
        }
        let train_set = population.samples(labels, Split::Train)?;
        let mut net = Network::<f32>::init(spec, self.training.seed);
        train(
            &mut net,
            &train_set,
            &[],
            &self.training,
            TrainOptions::default(),
        )?;
        let all: Vec<Sample> = population
            .images
            .iter()
            .map(|i| Sample {
                id: i.image_id.clone(),
                image: i.image.clone(),
                target: Target::PresenceLocation {
                    presence: false,
                    location: None,
                },
            })
            .collect();
        Ok(evaluate(&net, &all, self.training.secondary_loss_weight)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub max_rounds: u32,
    /// A round queuing fewer items ends the false-positive phase.
    pub min_queue: usize,
    /// Reviews per round; `None` reviews the whole queue.
    pub budget: Option<usize>,
    pub final_fn_pass: bool,
    pub reviewer: String,
    /// Recall target of the validation operating point used as threshold.
    pub recall_target: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_rounds: 5,
            min_queue: 5,
            budget: None,
            final_fn_pass: true,
            reviewer: "oracle".into(),
            recall_target: 0.85,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        if !(self.recall_target > 0.0 && self.recall_target <= 1.0) {
            return Err(Error::invalid("recall_target must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    NotStarted,
    Reviewing,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub kind: QueueKind,
    pub threshold: f64,
    pub queued: usize,
    pub reviewed: usize,
    pub flipped: usize,
}

/// Everything the loop knows. Holds labels, never truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub config: LoopConfig,
    pub population: usize,
    pub round: u32,
    pub phase: Phase,
    pub queue_kind: Option<QueueKind>,
    pub threshold: Option<f64>,
    pub queue: Vec<ReviewItem>,
    pub history: Vec<RoundRecord>,
    pub reviewed: usize,
    /// Cumulative reviewed fraction after each closed queue.
    pub reviewed_fraction: Vec<f64>,
    pub labels: LabelStore,
    /// Scores of the latest model, by image id.
    pub scores: BTreeMap<String, f64>,
    /// Bumped on every mutation.
    pub version: u64,
}

fn is_reviewed(l: &FractureLabel) -> bool {
    matches!(
        l.provenance.source,
        LabelSource::OracleReview | LabelSource::HumanReview
    )
}

impl LoopState {
    pub fn new(config: LoopConfig, labels: LabelStore) -> Result<Self> {
        config.validate()?;
        Ok(LoopState {
            config,
            population: labels.len(),
            round: 0,
            phase: Phase::NotStarted,
            queue_kind: None,
            threshold: None,
            queue: Vec::new(),
            history: Vec::new(),
            reviewed: 0,
            reviewed_fraction: Vec::new(),
            labels,
            scores: BTreeMap::new(),
            version: 0,
        })
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewItem> {
        self.queue
            .iter()
            .filter(|i| i.status == ReviewStatus::Pending)
    }

    fn rescore(&mut self, population: &Population, scorer: &mut dyn RoundScorer) -> Result<()> {
        let scores = scorer.score(population, &self.labels, self.round)?;
        if scores.len() != population.len() {
            return Err(Error::shape("scorer returned the wrong number of scores"));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("model score {s} is not finite")));
        }
        self.scores = population.ids().into_iter().zip(scores).collect();
        let (mut vs, mut vl) = (Vec::new(), Vec::new());
        for i in population.images.iter().filter(|i| i.split == Split::Val) {
            vs.push(self.scores[&i.image_id]);
            vl.push(self.labels[&i.image_id].fracture);
        }
        let curve = roc_curve(&vs, &vl).map_err(|e| {
            Error::data(format!(
                "cannot set the review threshold on validation labels: {e}"
            ))
        })?;
        let op = pick_operating_point(&curve, OperatingMode::HighRecall, self.config.recall_target);
        self.threshold = Some(op.threshold);
        Ok(())
    }

    fn open_queue(&mut self, kind: QueueKind) -> Result<()> {
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (id, &s) in &self.scores {
            let l = &self.labels[id];
            if is_reviewed(l) {
                continue;
            }
            ids.push(id.clone());
            scores.push(s);
            labels.push(l.fracture);
        }
        let t = self
            .threshold
            .ok_or_else(|| Error::invalid("no threshold set"))?;
        self.queue = enumerate_discrepancies(&ids, &scores, &labels, t, kind, self.round)?;
        self.queue_kind = Some(kind);
        self.phase = Phase::Reviewing;
        self.version += 1;
        Ok(())
    }

    /// Train the first model and open the first false-positive queue.
    pub fn start(&mut self, population: &Population, scorer: &mut dyn RoundScorer) -> Result<()> {
        if self.phase != Phase::NotStarted {
            return Err(Error::Conflict(
                "the cleaning loop has already started".into(),
            ));
        }
        if population.len() != self.labels.len() {
            return Err(Error::data("population and label store differ in size"));
        }
        self.round = 1;
        self.rescore(population, scorer)?;
        self.open_queue(QueueKind::FalsePositive)
    }

    /// Apply one decision to a pending item of the open queue.
    pub fn adjudicate(
        &mut self,
        image_id: &str,
        decision: Decision,
        source: LabelSource,
    ) -> Result<ReviewItem> {
        if self.phase != Phase::Reviewing {
            return Err(Error::Conflict("no review queue is open".into()));
        }
        let round = self.round;
        let item = self
            .queue
            .iter_mut()
            .find(|i| i.image_id == image_id)
            .ok_or_else(|| Error::Conflict(format!("{image_id} is not queued in round {round}")))?;
        if item.status != ReviewStatus::Pending {
            return Err(Error::Conflict(format!(
                "{image_id} was already adjudicated in round {round}"
            )));
        }
        let label = self
            .labels
            .get_mut(image_id)
            .ok_or_else(|| Error::data(format!("no label for {image_id}")))?;
        label
            .provenance
            .advance(LabelProvenance { source, round })?;
        match decision {
            Decision::Confirm => item.status = ReviewStatus::Confirmed,
            Decision::Flip => {
                label.fracture = !label.fracture;
                label.location = if label.fracture {
                    None
                } else {
                    Some(FractureLocation::None)
                };
                item.status = ReviewStatus::Flipped;
            }
        }
        self.reviewed += 1;
        self.version += 1;
        Ok(item.clone())
    }

    /// Let `reviewer` work through the open queue in order, up to the
    /// budget. `on_decision` sees the labels after every applied decision.
    pub fn review_with(
        &mut self,
        reviewer: &mut dyn Reviewer,
        on_decision: &mut dyn FnMut(&LabelStore),
    ) -> Result<usize> {
        let budget = self.config.budget.unwrap_or(usize::MAX);
        let done = self
            .queue
            .iter()
            .filter(|i| i.status != ReviewStatus::Pending)
            .count();
        let todo: Vec<ReviewItem> = self
            .pending()
            .take(budget.saturating_sub(done))
            .cloned()
            .collect();
        let mut applied = 0;
        for item in todo {
            if let Some(d) = reviewer.decide(&item) {
                self.adjudicate(&item.image_id, d, reviewer.source())?;
                on_decision(&self.labels);
                applied += 1;
            }
        }
        Ok(applied)
    }

    /// Close the open queue and move on: retrain and open the next
    /// false-positive queue, open the final false-negative pass, or finish.
    pub fn advance(&mut self, population: &Population, scorer: &mut dyn RoundScorer) -> Result<()> {
        if self.phase != Phase::Reviewing {
            return Err(Error::Conflict(format!(
                "cannot advance a loop in phase {:?}",
                self.phase
            )));
        }
        let kind = self.queue_kind.expect("open queue has a kind");
        let reviewed = self
            .queue
            .iter()
            .filter(|i| i.status != ReviewStatus::Pending)
            .count();
        let flipped = self
            .queue
            .iter()
            .filter(|i| i.status == ReviewStatus::Flipped)
            .count();
        let queued = self.queue.len();
        self.history.push(RoundRecord {
            round: self.round,
            kind,
            threshold: self.threshold.unwrap_or(f64::NAN),
            queued,
            reviewed,
            flipped,
        });
        self.reviewed_fraction
            .push(self.reviewed as f64 / self.population.max(1) as f64);
        self.queue.clear();
        self.queue_kind = None;
        self.version += 1;
        if kind == QueueKind::FalseNegative {
            self.phase = Phase::Done;
            return Ok(());
        }
        let fp_done =
            flipped == 0 || queued < self.config.min_queue || self.round >= self.config.max_rounds;
        self.round += 1;
        if !fp_done {
            self.rescore(population, scorer)?;
            return self.open_queue(QueueKind::FalsePositive);
        }
        if self.config.final_fn_pass {
            self.open_queue(QueueKind::FalseNegative)
        } else {
            self.phase = Phase::Done;
            Ok(())
        }
    }

    /// Drive the loop to completion with an automatic reviewer. Stops early,
    /// leaving the queue open, if the reviewer defers any item.
    pub fn run(
        &mut self,
        population: &Population,
        scorer: &mut dyn RoundScorer,
        reviewer: &mut dyn Reviewer,
        on_decision: &mut dyn FnMut(&LabelStore),
    ) -> Result<()> {
        if self.phase == Phase::NotStarted {
            self.start(population, scorer)?;
        }
        while self.phase == Phase::Reviewing {
            self.review_with(reviewer, on_decision)?;
            let budget_left = self.config.budget.is_none_or(|b| {
                self.queue
                    .iter()
                    .filter(|i| i.status != ReviewStatus::Pending)
                    .count()
                    < b
            });
            if budget_left && self.pending().next().is_some() {
                return Ok(());
            }
            self.advance(population, scorer)?;
        }
        Ok(())
    }
}

/// Measures label accuracy against hidden truth. Nothing it computes flows
/// back into the loop.
pub struct Auditor {
    truth: BTreeMap<String, bool>,
    pub trace: Vec<f64>,
}

impl Auditor {
    pub fn new(truth: BTreeMap<String, bool>) -> Self {
        Auditor {
            truth,
            trace: Vec::new(),
        }
    }

    pub fn accuracy(&self, labels: &LabelStore) -> f64 {
        let correct = labels
            .iter()
            .filter(|(id, l)| self.truth.get(*id) == Some(&l.fracture))
            .count();
        correct as f64 / labels.len().max(1) as f64
    }

    pub fn record(&mut self, labels: &LabelStore) {
        let a = self.accuracy(labels);
        self.trace.push(a);
    }

    /// Image ids whose labels disagree with truth.
    pub fn errors(&self, labels: &LabelStore) -> BTreeSet<String> {
        labels
            .iter()
            .filter(|(id, l)| self.truth.get(*id) != Some(&l.fracture))
            .map(|(id, _)| id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores from a fixed table, independent of labels.
    struct TableScorer(Vec<f64>);

    impl RoundScorer for TableScorer {
        fn score(&mut self, _: &Population, _: &LabelStore, _: u32) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn setup(truth: &[bool], noisy: &[bool]) -> (Population, LabelStore, BTreeMap<String, bool>) {
        let mut images = Vec::new();
        let mut labels = LabelStore::new();
        let mut t = BTreeMap::new();
        for (i, (&y, &n)) in truth.iter().zip(noisy).enumerate() {
            let id = format!("C{i:05}-L");
            images.push(LoopImage {
                image_id: id.clone(),
                split: if i % 5 == 4 { Split::Val } else { Split::Train },
                image: vec![0.0],
            });
            labels.insert(
                id.clone(),
                FractureLabel {
                    fracture: n,
                    location: None,
                    provenance: LabelProvenance {
                        source: LabelSource::NoisyInitial,
                        round: 0,
                    },
                },
            );
            t.insert(id, y);
        }
        (
            Population {
                input_size: 1,
                images,
            },
            labels,
            t,
        )
    }

    fn truth_scores(truth: &[bool]) -> Vec<f64> {
        truth.iter().map(|&y| if y { 4.0 } else { -4.0 }).collect()
    }

    #[test]
    fn oracle_repairs_flipped_labels_with_nondecreasing_accuracy() {
        let truth: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let mut noisy = truth.clone();
        noisy[0] = false;
        noisy[8] = false;
        noisy[3] = true;
        let (pop, labels, t) = setup(&truth, &noisy);
        let mut state = LoopState::new(LoopConfig::default(), labels).unwrap();
        let mut auditor = Auditor::new(t.clone());
        auditor.record(&state.labels);
        let mut reviewer = OracleReviewer::new(t);
        let mut scorer = TableScorer(truth_scores(&truth));
        state
            .run(&pop, &mut scorer, &mut reviewer, &mut |l| auditor.record(l))
            .unwrap();
        assert_eq!(state.phase, Phase::Done);
        assert_eq!(auditor.accuracy(&state.labels), 1.0);
        assert!(auditor.trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(state.reviewed, 3);
        assert_eq!(
            state.history.iter().map(|r| r.reviewed).sum::<usize>(),
            state.reviewed
        );
    }

    #[test]
    fn zero_noise_ends_after_one_round_without_flips() {
        let truth: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let (pop, labels, t) = setup(&truth, &truth);
        let mut state = LoopState::new(LoopConfig::default(), labels.clone()).unwrap();
        let mut scorer = TableScorer(truth_scores(&truth));
        state
            .run(&pop, &mut scorer, &mut OracleReviewer::new(t), &mut |_| {})
            .unwrap();
        assert_eq!(state.history[0].flipped, 0);
        assert_eq!(state.history.len(), 2);
        assert_eq!(state.history[1].kind, QueueKind::FalseNegative);
        assert!(state
            .labels
            .values()
            .zip(labels.values())
            .all(|(a, b)| a.fracture == b.fracture));
    }

    #[test]
    fn confirm_all_never_changes_labels() {
        let truth: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let noisy: Vec<bool> = truth.iter().map(|y| !y).collect();
        let (pop, labels, _) = setup(&truth, &noisy);
        let mut state = LoopState::new(LoopConfig::default(), labels.clone()).unwrap();
        let mut scorer = TableScorer(truth_scores(&truth));
        state
            .run(&pop, &mut scorer, &mut ConfirmAllReviewer, &mut |_| {})
            .unwrap();
        assert!(state
            .labels
            .values()
            .zip(labels.values())
            .all(|(a, b)| a.fracture == b.fracture));
    }

    #[test]
    fn double_adjudication_is_rejected() {
        let truth: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let mut noisy = truth.clone();
        noisy[0] = false;
        let (pop, labels, _) = setup(&truth, &noisy);
        let mut state = LoopState::new(LoopConfig::default(), labels).unwrap();
        state
            .start(&pop, &mut TableScorer(truth_scores(&truth)))
            .unwrap();
        let id = state.queue[0].image_id.clone();
        state
            .adjudicate(&id, Decision::Flip, LabelSource::OracleReview)
            .unwrap();
        let again = state.adjudicate(&id, Decision::Flip, LabelSource::OracleReview);
        assert!(matches!(again, Err(Error::Conflict(_))));
        assert!(state.labels[&id].fracture);
    }

    #[test]
    fn zero_budget_reviews_nothing() {
        let truth: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let noisy: Vec<bool> = truth.iter().map(|y| !y).collect();
        let (pop, labels, t) = setup(&truth, &noisy);
        let cfg = LoopConfig {
            budget: Some(0),
            ..LoopConfig::default()
        };
        let mut state = LoopState::new(cfg, labels).unwrap();
        state
            .run(
                &pop,
                &mut TableScorer(truth_scores(&truth)),
                &mut OracleReviewer::new(t),
                &mut |_| {},
            )
            .unwrap();
        assert_eq!(state.phase, Phase::Done);
        assert_eq!(state.reviewed, 0);
    }
}
