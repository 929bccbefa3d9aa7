use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::LabelSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueueKind {
    /// Labelled negative, scored at or above the threshold.
    FalsePositive,
    /// Labelled positive, scored below the threshold.
    FalseNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewStatus {
    Pending,
    Confirmed,
    Flipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Confirm,
    Flip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_id: String,
    pub queue_kind: QueueKind,
    pub model_score: f64,
    pub current_label: bool,
    pub round: u32,
    pub status: ReviewStatus,
}

/// Discrepancies of one kind, most confident first (distance from the
/// threshold), ties by ascending image id.
pub fn enumerate_discrepancies(
    ids: &[String],
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    kind: QueueKind,
    round: u32,
) -> Result<Vec<ReviewItem>> {
    if ids.len() != scores.len() || ids.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} ids, {} scores and {} labels are not aligned",
            ids.len(),
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is not a number")));
    }
    let mut items: Vec<ReviewItem> = ids
        .iter()
        .zip(scores)
        .zip(labels)
        .filter(|((_, &s), &y)| match kind {
            QueueKind::FalsePositive => !y && s >= threshold,
            QueueKind::FalseNegative => y && s < threshold,
        })
        .map(|((id, &s), &y)| ReviewItem {
            image_id: id.clone(),
            queue_kind: kind,
            model_score: s,
            current_label: y,
            round,
            status: ReviewStatus::Pending,
        })
        .collect();
    items.sort_by(|a, b| {
        let da = (a.model_score - threshold).abs();
        let db = (b.model_score - threshold).abs();
        db.total_cmp(&da).then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(items)
}

/// Source of adjudications. `decide` returning `None` leaves the item
/// pending for an out-of-band decision.
pub trait Reviewer: Send {
    fn name(&self) -> &'static str;
    fn source(&self) -> LabelSource;
    fn decide(&mut self, item: &ReviewItem) -> Option<Decision>;
}

/// Reads hidden truth: flips exactly the wrong labels.
pub struct OracleReviewer {
    truth: BTreeMap<String, bool>,
}

impl OracleReviewer {
    pub fn new(truth: BTreeMap<String, bool>) -> Self {
        OracleReviewer { truth }
    }
}

impl Reviewer for OracleReviewer {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn source(&self) -> LabelSource {
        LabelSource::OracleReview
    }

    fn decide(&mut self, item: &ReviewItem) -> Option<Decision> {
        let t = *self.truth.get(&item.image_id)?;
        Some(if t == item.current_label {
            Decision::Confirm
        } else {
            Decision::Flip
        })
    }
}

/// Confirms everything; labels never change.
pub struct ConfirmAllReviewer;

impl Reviewer for ConfirmAllReviewer {
    fn name(&self) -> &'static str {
        "confirm-all"
    }

    fn source(&self) -> LabelSource {
        LabelSource::HumanReview
    }

    fn decide(&mut self, _: &ReviewItem) -> Option<Decision> {
        Some(Decision::Confirm)
    }
}

/// Decisions arrive through the review service.
pub struct ExternalReviewer;

impl Reviewer for ExternalReviewer {
    fn name(&self) -> &'static str {
        "external"
    }

    fn source(&self) -> LabelSource {
        LabelSource::HumanReview
    }

    fn decide(&mut self, _: &ReviewItem) -> Option<Decision> {
        None
    }
}

type ReviewerFactory =
    Box<dyn Fn(Option<&BTreeMap<String, bool>>) -> Result<Box<dyn Reviewer>> + Send + Sync>;

pub struct ReviewerRegistry {
    entries: BTreeMap<&'static str, ReviewerFactory>,
}

impl ReviewerRegistry {
    pub fn empty() -> Self {
        ReviewerRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: ReviewerFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    /// `truth` is handed only to reviewers that need it.
    pub fn create(
        &self,
        name: &str,
        truth: Option<&BTreeMap<String, bool>>,
    ) -> Result<Box<dyn Reviewer>> {
        let f = self
            .entries
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "reviewer",
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        f(truth)
    }
}

impl Default for ReviewerRegistry {
    fn default() -> Self {
        let mut r = ReviewerRegistry::empty();
        r.register(
            "oracle",
            Box::new(|truth| {
                let t = truth
                    .ok_or_else(|| Error::invalid("the oracle reviewer needs ground truth"))?;
                Ok(Box::new(OracleReviewer::new(t.clone())) as Box<dyn Reviewer>)
            }),
        );
        r.register(
            "confirm-all",
            Box::new(|_| Ok(Box::new(ConfirmAllReviewer) as Box<dyn Reviewer>)),
        );
        r.register(
            "external",
            Box::new(|_| Ok(Box::new(ExternalReviewer) as Box<dyn Reviewer>)),
        );
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i:05}-L")).collect()
    }

    #[test]
    fn correct_labels_under_perfect_model_queue_nothing() {
        let labels = [true, false, true, false];
        let scores = [3.0, -3.0, 2.0, -1.0];
        for kind in [QueueKind::FalsePositive, QueueKind::FalseNegative] {
            assert!(
                enumerate_discrepancies(&ids(4), &scores, &labels, 0.0, kind, 1)
                    .unwrap()
                    .is_empty()
            );
        }
    }

    #[test]
    fn single_flipped_positive_is_the_only_item() {
        let labels = [true, false, false, false];
        let scores = [3.0, 2.5, -3.0, -1.0];
        let q =
            enumerate_discrepancies(&ids(4), &scores, &labels, 0.0, QueueKind::FalsePositive, 1)
                .unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].image_id, "C00001-L");
    }

    #[test]
    fn equal_scores_order_by_id() {
        let mut v = ids(3);
        v.reverse();
        let q = enumerate_discrepancies(
            &v,
            &[1.0, 1.0, 2.0],
            &[false; 3],
            0.0,
            QueueKind::FalsePositive,
            1,
        )
        .unwrap();
        let order: Vec<&str> = q.iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(order, ["C00000-L", "C00001-L", "C00002-L"]);
    }

    #[test]
    fn registry_knows_the_reviewers() {
        let r = ReviewerRegistry::default();
        assert_eq!(r.names(), ["confirm-all", "external", "oracle"]);
        assert!(r.create("oracle", None).is_err());
        assert!(r.create("nobody", None).is_err());
    }
}
