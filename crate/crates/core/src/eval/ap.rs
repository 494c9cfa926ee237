use super::tiou_unchecked;
use crate::detection::VideoSegment;

/// Indices of `preds` ordered by score, highest first, stable on ties.
pub(crate) fn score_order(preds: &[VideoSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].segment.score.total_cmp(&preds[a].segment.score));
    order
}

/// Greedy matching in score order: each prediction takes the unmatched
/// ground truth of its video and class with the highest tIoU at or above
/// `threshold` (lowest index on ties). Returns the true-positive flag of
/// every prediction in score order.
pub fn match_predictions(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    score_order(preds)
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.video_id != p.video_id || g.segment.class_id != p.segment.class_id {
                    continue;
                }
                let iou = tiou_unchecked((p.segment.start, p.segment.end), (g.segment.start, g.segment.end));
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each prediction in score order.
pub fn precision_recall(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64) -> Vec<(f64, f64)> {
    let hits = match_predictions(preds, gts, threshold);
    let n_gt = gts.len() as f64;
    let mut tp = 0.0;
    hits.iter()
        .enumerate()
        .map(|(k, &hit)| {
            if hit {
                tp += 1.0;
            }
            (tp / n_gt, tp / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated average precision; `None` without ground truth.
///
/// Matching respects video and class, so mixed inputs are allowed, but the
/// usual call passes a single class.
pub fn average_precision(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let curve = precision_recall(preds, gts, threshold);
    // precision envelope from the right
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in curve.iter().zip(&envelope) {
        if recall > prev_recall {
            ap += (recall - prev_recall) * p;
            prev_recall = recall;
        }
    }
    Some(ap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ActionSegment;

    fn vs(video: &str, s: f64, e: f64, c: usize, score: f64) -> VideoSegment {
        VideoSegment::new(video, ActionSegment::new(s, e, c, score))
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![vs("a", 0.0, 5.0, 0, 1.0), vs("b", 2.0, 9.0, 0, 1.0)];
        assert_eq!(average_precision(&gts, &gts, 0.5), Some(1.0));
    }

    #[test]
    fn no_predictions_or_no_ground_truth() {
        let gts = vec![vs("a", 0.0, 5.0, 0, 1.0)];
        assert_eq!(average_precision(&[], &gts, 0.5), Some(0.0));
        assert_eq!(average_precision(&gts, &[], 0.5), None);
    }

    #[test]
    fn hand_case() {
        // hits at ranks 1 and 3 of two ground truths
        let gts = vec![vs("a", 0.0, 10.0, 0, 1.0), vs("a", 20.0, 30.0, 0, 1.0)];
        let preds = vec![
            vs("a", 0.0, 10.0, 0, 0.9),
            vs("a", 40.0, 50.0, 0, 0.8),
            vs("a", 21.0, 30.0, 0, 0.7),
        ];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicates_do_not_double_count() {
        let gts = vec![vs("a", 0.0, 10.0, 0, 1.0)];
        let preds = vec![vs("a", 0.0, 10.0, 0, 0.9), vs("a", 0.0, 10.0, 0, 0.8)];
        assert_eq!(match_predictions(&preds, &gts, 0.5), vec![true, false]);
        assert_eq!(average_precision(&preds, &gts, 0.5), Some(1.0));
    }
}
