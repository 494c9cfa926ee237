use serde::{Deserialize, Serialize};

use super::head::HeadValues;
use super::segment::ActionSegment;
use crate::autodiff::scalar::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.001,
            pre_nms_topk: 2000,
        }
    }
}

/// Candidate segments of video `b`.
///
/// Every valid position `t` of level `i` with class score above the
/// threshold yields `[s*(t - d_s), s*(t + d_e)]` with `s = 2^(i-1)`,
/// clamped to `[0, T_0]`. Segments that collapse to zero length after
/// clamping are dropped. The `pre_nms_topk` best are kept, ties in
/// enumeration order (level, position, class).
pub fn decode_video(values: &HeadValues, b: usize, cfg: &DecodeConfig) -> Vec<ActionSegment> {
    let t0 = values.valid[b].first().copied().unwrap_or(0) as f64;
    let mut out = Vec::new();
    for (li, (logits, offsets)) in values.class_logits.iter().zip(&values.offsets).enumerate() {
        let s = values.strides[li] as f64;
        let [_, classes, _] = logits.dims();
        for t in 0..values.valid[b][li] {
            let start = (s * (t as f64 - offsets.get(b, 0, t))).max(0.0);
            let end = (s * (t as f64 + offsets.get(b, 1, t))).min(t0);
            if end <= start {
                continue;
            }
            for c in 0..classes {
                let score = sigmoid(logits.get(b, c, t));
                if score >= cfg.score_threshold {
                    out.push(ActionSegment::new(start, end, c, score));
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.pre_nms_topk);
    out
}

/// [`decode_video`] for every video of the batch.
pub fn decode(values: &HeadValues, cfg: &DecodeConfig) -> Vec<Vec<ActionSegment>> {
    (0..values.valid.len()).map(|b| decode_video(values, b, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor3;

    fn single(level_stride: usize, t: usize, ds: f64, de: f64) -> ActionSegment {
        let len = 64;
        let mut logits = Tensor3::filled([1, 1, len], -50.0);
        logits.set(0, 0, t, 5.0);
        let mut offsets = Tensor3::zeros([1, 2, len]);
        offsets.set(0, 0, t, ds);
        offsets.set(0, 1, t, de);
        let values = HeadValues {
            class_logits: vec![logits],
            offsets: vec![offsets],
            strides: vec![level_stride],
            valid: vec![vec![len]],
        };
        let cfg = DecodeConfig {
            score_threshold: 0.5,
            pre_nms_topk: 10,
        };
        let segs = decode_video(&values, 0, &cfg);
        assert_eq!(segs.len(), 1);
        segs[0]
    }

    #[test]
    fn direct_formula() {
        let s = single(1, 10, 2.0, 3.0);
        assert_eq!((s.start, s.end), (8.0, 13.0));
        let s = single(4, 5, 1.0, 2.0);
        assert_eq!((s.start, s.end), (16.0, 28.0));
    }
}
