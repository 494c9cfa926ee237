use serde::{Deserialize, Serialize};

use super::ap::score_order;
use super::tiou_unchecked;
use crate::detection::VideoSegment;

/// Matching threshold of the breakdown.
pub const ERROR_TIOU: f64 = 0.5;
/// Overlap below which a prediction counts as background.
const BACKGROUND_TIOU: f64 = 0.1;
const BINS: usize = 10;

/// Prediction outcomes within one bin of G predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub true_positive: usize,
    /// Overlaps a matched same-class ground truth at the threshold.
    pub double_detection: usize,
    /// Overlaps another class's ground truth by at least 0.1.
    pub wrong_label: usize,
    /// Same class, overlap in `[0.1, 0.5)`.
    pub localization: usize,
    /// Overlap below 0.1 with every ground truth of the video.
    pub background: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.true_positive + self.double_detection + self.wrong_label + self.localization + self.background
    }
}

/// Labels the top `10 G` predictions (G = number of ground truths) in score
/// order and counts them in ten bins of G. Also returns how many ground
/// truths no prediction found.
pub fn error_breakdown(preds: &[VideoSegment], gts: &[VideoSegment]) -> (Vec<ErrorCounts>, usize) {
    let g = gts.len();
    let mut bins = vec![ErrorCounts::default(); BINS];
    let mut matched = vec![false; g];
    if g == 0 {
        return (bins, 0);
    }
    for (rank, i) in score_order(preds).into_iter().take(BINS * g).enumerate() {
        let p = &preds[i];
        let counts = &mut bins[rank / g];
        let mut best_free: Option<(usize, f64)> = None;
        let mut best_same = 0.0f64;
        let mut best_other = 0.0f64;
        for (j, gt) in gts.iter().enumerate().filter(|(_, gt)| gt.video_id == p.video_id) {
            let iou = tiou_unchecked((p.segment.start, p.segment.end), (gt.segment.start, gt.segment.end));
            if gt.segment.class_id == p.segment.class_id {
                best_same = best_same.max(iou);
                if !matched[j] && iou >= ERROR_TIOU && best_free.is_none_or(|(_, b)| iou > b) {
                    best_free = Some((j, iou));
                }
            } else {
                best_other = best_other.max(iou);
            }
        }
        if let Some((j, _)) = best_free {
            matched[j] = true;
            counts.true_positive += 1;
        } else if best_same >= ERROR_TIOU {
            counts.double_detection += 1;
        } else if best_other >= BACKGROUND_TIOU {
            counts.wrong_label += 1;
        } else if best_same >= BACKGROUND_TIOU {
            counts.localization += 1;
        } else {
            counts.background += 1;
        }
    }
    let missed = matched.iter().filter(|m| !**m).count();
    (bins, missed)
}
