//! Independent reference implementations used by the integration tests.
//!
//! Each oracle is written from the rule it checks, without calling the
//! library code it is compared against.

#![allow(dead_code)]

use contextdet::detection::{ActionSegment, LossConfig, PyramidShape, VideoSegment};
use contextdet::eval::SoftNmsConfig;
use rand::Rng;

/// Interval on a grid of 1/8 steps so that every sum and difference is
/// exact in f64.
pub fn grid_interval(rng: &mut impl Rng, max_start: u32, max_len: u32) -> (f64, f64) {
    let s = rng.random_range(0..=max_start * 8) as f64 / 8.0;
    let len = rng.random_range(1..=max_len * 8) as f64 / 8.0;
    (s, s + len)
}

/// Measure of a union of intervals by sweeping sorted endpoints.
pub fn union_measure(intervals: &[(f64, f64)]) -> f64 {
    let mut sorted = intervals.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s, e) in sorted {
        cur = match cur {
            Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                Some((s, e))
            }
            None => Some((s, e)),
        };
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

/// tIoU from set measures: |A ∩ B| = |A| + |B| - |A ∪ B|.
pub fn tiou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let union = union_measure(&[a, b]);
    let inter = (a.1 - a.0) + (b.1 - b.0) - union;
    inter / union
}

/// 1D GIoU loss from interval sets around a shared anchor at 0.
pub fn giou_oracle(pred: (f64, f64), target: (f64, f64)) -> f64 {
    let p = (-pred.0, pred.1);
    let t = (-target.0, target.1);
    let union = union_measure(&[p, t]);
    let inter = (p.1 - p.0) + (t.1 - t.0) - union;
    let hull = p.1.max(t.1) - p.0.min(t.0);
    1.0 - inter / union + (hull - union) / hull
}

/// Sigmoid focal loss of one position, straight from its definition.
pub fn focal_oracle(logits: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (c, &l) in logits.iter().enumerate() {
        let p = 1.0 / (1.0 + (-l).exp());
        let (p_t, a_t) = if target == Some(c) { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        total += -a_t * (1.0 - p_t).powf(gamma) * p_t.ln();
    }
    total
}

/// Soft-NMS written as a plain loop over a score-sorted candidate list.
pub fn soft_nms_oracle(input: &[ActionSegment], cfg: &SoftNmsConfig) -> Vec<ActionSegment> {
    let mut cand: Vec<(usize, ActionSegment)> = input
        .iter()
        .enumerate()
        .filter(|(_, s)| s.score >= cfg.score_floor)
        .map(|(i, s)| (i, *s))
        .collect();
    let mut out = Vec::new();
    while out.len() < cfg.max_keep && !cand.is_empty() {
        // highest score, then earliest original position
        cand.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let (_, top) = cand.remove(0);
        out.push(top);
        let mut next = Vec::new();
        for (i, mut s) in cand {
            if s.class_id == top.class_id {
                let o = tiou_oracle((top.start, top.end), (s.start, s.end));
                let f = match cfg.method {
                    contextdet::eval::NmsMethod::Gaussian => (-(o * o) / cfg.sigma).exp(),
                    contextdet::eval::NmsMethod::Linear => {
                        if o >= cfg.iou_cut {
                            1.0 - o
                        } else {
                            1.0
                        }
                    }
                };
                s.score *= f;
            }
            if s.score >= cfg.score_floor {
                next.push((i, s));
            }
        }
        cand = next;
    }
    out
}

/// True-positive flags in score order, found by enumerating every partial
/// one-to-one matching and keeping the one whose per-prediction
/// `(tIoU, -gt index)` sequence is lexicographically largest. This is the
/// matching the greedy rule is meant to produce.
pub fn exhaustive_match(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].segment.score.total_cmp(&preds[a].segment.score).then(a.cmp(&b)));
    let candidates: Vec<Vec<(usize, f64)>> = order
        .iter()
        .map(|&i| {
            let p = &preds[i];
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.video_id == p.video_id && g.segment.class_id == p.segment.class_id)
                .map(|(j, g)| (j, tiou_oracle((p.segment.start, p.segment.end), (g.segment.start, g.segment.end))))
                .filter(|&(_, o)| o >= threshold)
                .collect()
        })
        .collect();

    type Key = Vec<(f64, i64)>;
    fn better(a: &Key, b: &Key) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 > y.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
        }
        false
    }
    fn search(
        k: usize,
        cands: &[Vec<(usize, f64)>],
        used: &mut Vec<bool>,
        key: &mut Key,
        best: &mut Option<Key>,
    ) {
        if k == cands.len() {
            if best.as_ref().is_none_or(|b| better(key, b)) {
                *best = Some(key.clone());
            }
            return;
        }
        for &(j, o) in &cands[k] {
            if !used[j] {
                used[j] = true;
                key.push((o, -(j as i64)));
                search(k + 1, cands, used, key, best);
                key.pop();
                used[j] = false;
            }
        }
        key.push((-1.0, 0));
        search(k + 1, cands, used, key, best);
        key.pop();
    }
    let mut best = None;
    search(0, &candidates, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.unwrap_or_default().iter().map(|&(o, _)| o >= 0.0).collect()
}

/// AP by the sentinel-padded precision envelope, summing precision at
/// every recall change.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        rec.push(tp as f64 / num_gt as f64);
        prec.push(tp as f64 / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).filter(|&i| rec[i] != rec[i - 1]).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Mean AP over classes that have ground truth, for each threshold.
pub fn map_oracle(preds: &[VideoSegment], gts: &[VideoSegment], thresholds: &[f64]) -> Vec<f64> {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.segment.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            let sum: f64 = classes
                .iter()
                .map(|&c| {
                    let p: Vec<VideoSegment> = preds.iter().filter(|s| s.segment.class_id == c).cloned().collect();
                    let g: Vec<VideoSegment> = gts.iter().filter(|s| s.segment.class_id == c).cloned().collect();
                    ap_from_flags(&exhaustive_match(&p, &g, t), g.len())
                })
                .sum();
            sum / classes.len() as f64
        })
        .collect()
}

/// Assignment decision for one video: `[level][t]` holds the matched
/// segment index. Every (position, segment) pair is tested against the
/// rule; among eligible segments the shortest wins, then the lowest index.
pub fn assign_oracle(segs: &[ActionSegment], shape: &PyramidShape, b: usize, cfg: &LossConfig) -> Vec<Vec<Option<usize>>> {
    let ranges = cfg.ranges(shape.levels());
    (0..shape.levels())
        .map(|li| {
            let s = (1u64 << li) as f64;
            (0..shape.padded[li])
                .map(|t| {
                    if t >= shape.valid[b][li] {
                        return None;
                    }
                    let x = s * t as f64;
                    let eligible: Vec<usize> = (0..segs.len())
                        .filter(|&u| {
                            let g = &segs[u];
                            let inside = g.start <= x && x <= g.end;
                            let centre = 0.5 * (g.start + g.end);
                            let near = (x - centre).abs() <= cfg.center_sampling_radius * s;
                            let reach = f64::max(x - g.start, g.end - x);
                            inside && near && ranges[li].0 <= reach && reach < ranges[li].1
                        })
                        .collect();
                    eligible.into_iter().min_by(|&a, &b| {
                        let la = segs[a].end - segs[a].start;
                        let lb = segs[b].end - segs[b].start;
                        la.total_cmp(&lb).then(a.cmp(&b))
                    })
                })
                .collect()
        })
        .collect()
}

/// Random ground truth on a half-step grid inside `[0, t0]`.
pub fn random_gt(rng: &mut impl Rng, t0: usize, num_classes: usize, max_segments: usize) -> Vec<ActionSegment> {
    let n = rng.random_range(0..=max_segments);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=t0) as f64 / 2.0 + 0.5;
            let start = (rng.random_range(0..=2 * t0) as f64 / 2.0).min(t0 as f64 - len);
            ActionSegment::ground_truth(start.max(0.0), (start.max(0.0) + len).min(t0 as f64), rng.random_range(0..num_classes))
        })
        .collect()
}

/// Padded-batch loss minus the sum of unbatched per-video losses, and
/// whether decoded and suppressed predictions agree exactly.
pub fn batching_equivalence(
    model: &contextdet::model::ContextDet,
    records: &[contextdet::data::VideoRecord],
    cfg: &contextdet::data::RunConfig,
) -> (f64, bool) {
    use contextdet::data::collate;
    use contextdet::train::{batch_loss, predict_batch};
    let pad = model.config().pad_multiple();
    let all: Vec<usize> = (0..records.len()).collect();
    let batch = collate(records, &all, pad).unwrap();
    let batched = batch_loss(model, &batch, cfg).unwrap();
    let preds = predict_batch(model, &batch, &cfg.eval).unwrap();
    let mut single_sum = 0.0;
    let mut same = true;
    for i in 0..records.len() {
        let one = collate(records, &[i], pad).unwrap();
        single_sum += batch_loss(model, &one, cfg).unwrap();
        same &= predict_batch(model, &one, &cfg.eval).unwrap()[0] == preds[i];
    }
    (batched - single_sum, same)
}

/// Small synthetic configuration shared by batching and reproducibility
/// tests.
pub fn small_run_config() -> contextdet::data::RunConfig {
    use contextdet::data::{RunConfig, SyntheticSpec};
    use contextdet::model::ModelConfig;
    let mut cfg = RunConfig {
        model: ModelConfig {
            input_dim: 6,
            embed_dim: 8,
            pyramid_levels: 3,
            num_classes: 3,
            lcm_large_kernel_max: 9,
            ..ModelConfig::default()
        },
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 3,
        ..RunConfig::default()
    };
    cfg.optim.lr = 1e-3;
    cfg.eval.thresholds = vec![0.5];
    cfg.data.synthetic = SyntheticSpec {
        num_videos: 6,
        num_classes: 3,
        input_dim: 6,
        min_time: 20,
        max_time: 45,
        min_segment_len: 3,
        max_segment_len: 12,
        ..SyntheticSpec::default()
    };
    cfg
}
