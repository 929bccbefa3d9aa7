//! Evaluation statistics: ROC/AUC, confusion metrics, exact binomial
//! intervals, operating points and prevalence-balanced subsampling.

mod binomial;
mod operating;
mod roc;

use serde::{Deserialize, Serialize};

pub use binomial::{binomial_cdf, clopper_pearson, BinomialCi};
pub use operating::{
    balanced_subsample, pick_operating_point, with_intervals, Estimate, MetricsWithCi,
    OperatingMode, OperatingPoint,
};
pub use roc::{confusion_at, roc_curve, ConfusionCounts, ConfusionMetrics, RocCurve, RocPoint};

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: MetricsWithCi,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<TableRow>,
}

impl MetricsTable {
    /// Fixed-width text rendering, `value (lower-upper)` per metric.
    pub fn to_text(&self) -> String {
        let header = [
            "",
            "Threshold",
            "Acc (CI95%)",
            "Precision (CI95%)",
            "Recall (CI95%)",
            "F1 (CI95%)",
            "TP",
            "FP",
            "TN",
            "FN",
        ];
        let fmt = |e: &Estimate| format!("{:.3} ({:.3}-{:.3})", e.value, e.lower, e.upper);
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let m = &r.metrics;
            let precision = if m.precision_undefined {
                format!("{}*", fmt(&m.precision))
            } else {
                fmt(&m.precision)
            };
            rows.push(vec![
                r.name.clone(),
                format!("{:.4}", r.threshold),
                fmt(&m.accuracy),
                precision,
                fmt(&m.recall),
                fmt(&m.f1),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.tn.to_string(),
                r.counts.fn_.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| {
                    if i == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if self.rows.iter().any(|r| r.metrics.precision_undefined) {
            out.push_str("* no positive predictions; precision reported as 0\n");
        }
        out
    }
}
