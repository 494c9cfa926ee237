//! Post-processing and evaluation: tIoU, SoftNMS, AP and mAP, and a
//! false-positive breakdown.

mod ap;
mod errors;
mod nms;

pub use ap::{average_precision, match_predictions, precision_recall};
pub use errors::{error_breakdown, ErrorCounts, ERROR_TIOU};
pub use nms::{soft_nms, NmsMethod, SoftNmsConfig};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::VideoSegment;
use crate::{Error, Result};

pub const THUMOS_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const HACS_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.95];

/// Temporal IoU of two `(start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s.is_finite() && e.is_finite()) || s >= e {
            return Err(Error::InvalidArgument(format!("degenerate interval [{s}, {e}]")));
        }
    }
    Ok(tiou_unchecked(a, b))
}

/// [`tiou`] without validation; zero when the union is empty.
pub(crate) fn tiou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub tiou: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    /// One entry per threshold.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdMap>,
    pub average_map: f64,
    /// Classes with at least one ground-truth segment, by id.
    pub per_class: Vec<ClassAp>,
    /// Breakdown of the top-10G predictions at tIoU 0.5 in ten bins of G.
    pub error_counts: Vec<ErrorCounts>,
    /// Ground truths not found by any top-10G prediction.
    pub false_negative: usize,
}

impl EvalReport {
    pub fn map_at(&self, tiou: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.tiou == tiou).map(|t| t.map)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `class_id,num_gt,ap@t1,ap@t2,...`
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,num_gt");
        for t in &self.thresholds {
            let _ = write!(out, ",ap@{:.2}", t.tiou);
        }
        out.push('\n');
        for c in &self.per_class {
            let _ = write!(out, "{},{}", c.class_id, c.num_gt);
            for ap in &c.ap {
                let _ = write!(out, ",{ap:.6}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one tIoU threshold is required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("tIoU threshold {t} outside (0, 1]")));
    }
    Ok(())
}

/// Per-class AP at each threshold, mAP over classes with ground truth and
/// the mean over thresholds.
pub fn evaluate(preds: &[VideoSegment], gts: &[VideoSegment], thresholds: &[f64]) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.segment.class_id).collect();
    let per_class: Vec<ClassAp> = classes
        .into_par_iter()
        .map(|c| {
            let p: Vec<VideoSegment> = preds.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            let g: Vec<VideoSegment> = gts.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            let ap = thresholds
                .iter()
                .map(|&t| average_precision(&p, &g, t).unwrap_or(0.0))
                .collect();
            ClassAp {
                class_id: c,
                num_gt: g.len(),
                ap,
            }
        })
        .collect();
    let maps: Vec<ThresholdMap> = thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let map = if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap[k]).sum::<f64>() / per_class.len() as f64
            };
            ThresholdMap { tiou: t, map }
        })
        .collect();
    let average_map = maps.iter().map(|m| m.map).sum::<f64>() / maps.len() as f64;
    let (error_counts, false_negative) = error_breakdown(preds, gts);
    Ok(EvalReport {
        thresholds: maps,
        average_map,
        per_class,
        error_counts,
        false_negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ActionSegment;

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((1.0, 3.0), (1.0, 3.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(tiou((0.0, 2.0), (1.0, 3.0)).unwrap(), 1.0 / 3.0);
        assert!(tiou((2.0, 2.0), (1.0, 3.0)).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<VideoSegment> = (0..3)
            .map(|c| VideoSegment::new("v", ActionSegment::ground_truth(10.0 * c as f64, 10.0 * c as f64 + 5.0, c)))
            .collect();
        let report = evaluate(&gts, &gts, &[0.3, 0.5, 0.7]).unwrap();
        assert!(report.thresholds.iter().all(|t| t.map == 1.0));
        assert_eq!(report.average_map, 1.0);
        assert_eq!(report.error_counts[0].true_positive, 3);
        assert_eq!(report.false_negative, 0);
    }

    #[test]
    fn empty_predictions_are_all_missed() {
        let gts = vec![VideoSegment::new("v", ActionSegment::ground_truth(0.0, 5.0, 1))];
        let report = evaluate(&[], &gts, &[0.5]).unwrap();
        assert_eq!(report.average_map, 0.0);
        assert_eq!(report.false_negative, 1);
        assert!(report.error_counts.iter().all(|c| c.total() == 0));
        assert!(evaluate(&[], &gts, &[]).unwrap_err().is_config());
    }

    #[test]
    fn csv_has_row_per_class() {
        let gts = vec![VideoSegment::new("v", ActionSegment::ground_truth(0.0, 5.0, 1))];
        let csv = evaluate(&gts, &gts, &[0.5, 0.7]).unwrap().per_class_csv();
        assert_eq!(csv, "class_id,num_gt,ap@0.50,ap@0.70\n1,1,1.000000,1.000000\n");
    }
}
