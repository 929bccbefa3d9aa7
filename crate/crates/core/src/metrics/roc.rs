use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(+inf, 0, 0)` down to the lowest score at `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Confusion counts of the rule `score >= threshold` predicts positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions; `precision` is reported as 0.
    pub precision_undefined: bool,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(self) -> ConfusionMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        ConfusionMetrics {
            counts: self,
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1,
            precision_undefined: self.tp + self.fp == 0,
        }
    }
}

fn check_aligned(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is not a number")));
    }
    Ok(())
}

pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMetrics> {
    check_aligned(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::invalid("confusion counts need at least one sample"));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c.metrics())
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    check_aligned(scores, labels)?;
    let p = labels.iter().filter(|&&y| y).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "ROC needs both classes, got {p} positives and {n} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units keeps the sum exact until the final divide
        auc += (fp - fp0) as f64 * (tp + tp0) as f64;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc / (2.0 * p as f64 * n as f64),
        positives: p,
        negatives: n,
    })
}

impl RocCurve {
    /// Trapezoidal area under the stored points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// Exact confusion counts at a stored point.
    pub fn counts_at(&self, point: &RocPoint) -> ConfusionCounts {
        let tp = (point.tpr * self.positives as f64).round() as usize;
        let fp = (point.fpr * self.negatives as f64).round() as usize;
        ConfusionCounts {
            tp,
            fp,
            tn: self.negatives - fp,
            fn_: self.positives - tp,
        }
    }

    /// `threshold,fpr,tpr` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                p.threshold, p.fpr, p.tpr
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<RocPoint>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("threshold,fpr,tpr") {
            return Err(Error::data(
                "ROC CSV must start with the header threshold,fpr,tpr",
            ));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let v: Vec<f64> = line
                    .split(',')
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::data(format!("ROC CSV line {}: {e}", i + 2)))?;
                match v[..] {
                    [threshold, fpr, tpr] => Ok(RocPoint {
                        threshold,
                        fpr,
                        tpr,
                    }),
                    _ => Err(Error::data(format!(
                        "ROC CSV line {} needs 3 fields",
                        i + 2
                    ))),
                }
            })
            .collect()
    }

    /// Standalone SVG plot of the curve with the chance diagonal.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, m) = (420.0, 420.0, 50.0);
        let x = |f: f64| m + f * (w - 2.0 * m);
        let y = |t: f64| h - m - t * (h - 2.0 * m);
        let path: Vec<String> = self
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr)))
            .collect();
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        svg.push_str(&format!(
            "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
            w - 2.0 * m,
            h - 2.0 * m
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n",
            x(0.0),
            y(0.0),
            x(1.0),
            y(1.0)
        ));
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{} (AUC {:.4})</text>\n",
            w / 2.0,
            escape(title),
            self.auc
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">False positive rate</text>\n",
            w / 2.0,
            h - 15.0
        ));
        svg.push_str(&format!(
            "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 15 {})\">True positive rate</text>\n",
            h / 2.0,
            h / 2.0
        ));
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
