use rand::Rng;
use serde::{Deserialize, Serialize};

use super::binomial::{clopper_pearson, BinomialCi};
use super::roc::{ConfusionMetrics, RocCurve};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatingMode {
    /// Maximise recall subject to precision >= target.
    HighPrecision,
    /// Maximise precision subject to recall >= target.
    HighRecall,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub mode: OperatingMode,
    pub target: f64,
    pub threshold: f64,
    pub metrics: ConfusionMetrics,
    /// False when no threshold meets the target; the closest point is returned.
    pub feasible: bool,
}

pub fn pick_operating_point(curve: &RocCurve, mode: OperatingMode, target: f64) -> OperatingPoint {
    let candidates: Vec<(f64, ConfusionMetrics)> = curve
        .points
        .iter()
        .filter(|p| p.threshold.is_finite())
        .map(|p| (p.threshold, curve.counts_at(p).metrics()))
        .collect();
    let (constraint, objective): (fn(&ConfusionMetrics) -> f64, fn(&ConfusionMetrics) -> f64) =
        match mode {
            OperatingMode::HighPrecision => (|m| m.precision, |m| m.recall),
            OperatingMode::HighRecall => (|m| m.recall, |m| m.precision),
        };
    // lexicographic: objective, then constraint, then the higher threshold
    let better = |a: &(f64, ConfusionMetrics),
                  b: &(f64, ConfusionMetrics),
                  key: fn(&ConfusionMetrics) -> f64,
                  tie: fn(&ConfusionMetrics) -> f64| {
        (key(&a.1), tie(&a.1), a.0) > (key(&b.1), tie(&b.1), b.0)
    };
    let mut best: Option<&(f64, ConfusionMetrics)> = None;
    for c in candidates.iter().filter(|c| constraint(&c.1) >= target) {
        if best.is_none_or(|b| better(c, b, objective, constraint)) {
            best = Some(c);
        }
    }
    let feasible = best.is_some();
    if best.is_none() {
        for c in &candidates {
            if best.is_none_or(|b| better(c, b, constraint, objective)) {
                best = Some(c);
            }
        }
    }
    let &(threshold, metrics) = best.expect("curve has finite thresholds");
    OperatingPoint {
        mode,
        target,
        threshold,
        metrics,
        feasible,
    }
}

/// A proportion with its Clopper-Pearson interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    fn from_counts(k: usize, n: usize, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Ok(Estimate {
                value: 0.0,
                lower: 0.0,
                upper: 1.0,
            });
        }
        let BinomialCi { lower, upper, .. } = clopper_pearson(k as u64, n as u64, alpha)?;
        Ok(Estimate {
            value: k as f64 / n as f64,
            lower,
            upper,
        })
    }
}

/// Accuracy, precision, recall and F1 with exact intervals. F1 is treated
/// as the proportion `2tp / (2tp + fp + fn)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsWithCi {
    pub accuracy: Estimate,
    pub precision: Estimate,
    pub recall: Estimate,
    pub f1: Estimate,
    pub precision_undefined: bool,
}

pub fn with_intervals(m: &ConfusionMetrics, alpha: f64) -> Result<MetricsWithCi> {
    let c = m.counts;
    Ok(MetricsWithCi {
        accuracy: Estimate::from_counts(c.tp + c.tn, c.total(), alpha)?,
        precision: Estimate::from_counts(c.tp, c.tp + c.fp, alpha)?,
        recall: Estimate::from_counts(c.tp, c.tp + c.fn_, alpha)?,
        f1: Estimate::from_counts(2 * c.tp, 2 * c.tp + c.fp + c.fn_, alpha)?,
        precision_undefined: m.precision_undefined,
    })
}

/// All positives plus an equal number of uniformly drawn negatives, as
/// sorted indices.
pub fn balanced_subsample(labels: &[bool], seed: u64) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if y {
            pos.push(i)
        } else {
            neg.push(i)
        }
    }
    if neg.len() < pos.len() {
        return Err(Error::invalid(format!(
            "balanced subsample needs at least as many negatives as positives ({} < {})",
            neg.len(),
            pos.len()
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag("balanced-subsample")]);
    partial_shuffle(&mut r, &mut neg, pos.len());
    neg.truncate(pos.len());
    pos.extend(neg);
    pos.sort_unstable();
    Ok(pos)
}

fn partial_shuffle<R: Rng + ?Sized>(r: &mut R, v: &mut [usize], k: usize) {
    for i in 0..k.min(v.len()) {
        let j = r.random_range(i..v.len());
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc::roc_curve;

    #[test]
    fn perfect_classifier_points() {
        let c = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        for mode in [OperatingMode::HighPrecision, OperatingMode::HighRecall] {
            let p = pick_operating_point(&c, mode, 0.95);
            assert!(p.feasible);
            assert_eq!(p.threshold, 0.8);
            assert_eq!((p.metrics.precision, p.metrics.recall), (1.0, 1.0));
        }
    }

    #[test]
    fn impossible_target_is_flagged() {
        let c = roc_curve(&[0.9, 0.2, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert!(!pick_operating_point(&c, OperatingMode::HighPrecision, 1.01).feasible);
        assert!(!pick_operating_point(&c, OperatingMode::HighRecall, 1.01).feasible);
    }

    #[test]
    fn balanced_subsample_shape() {
        let labels: Vec<bool> = (0..3345).map(|i| i < 348).collect();
        let idx = balanced_subsample(&labels, 4).unwrap();
        assert_eq!(idx.len(), 696);
        assert_eq!(idx.iter().filter(|&&i| labels[i]).count(), 348);
        assert_eq!(idx, balanced_subsample(&labels, 4).unwrap());
        let even = [true, false, true, false];
        assert_eq!(balanced_subsample(&even, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(balanced_subsample(&[true, true, false], 0).is_err());
    }
}
