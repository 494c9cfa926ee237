//! Library operations against independent reference implementations.

mod common;

use common::*;
use contextdet::autodiff::{scalar, Graph, Mask, SeqTensor, Tensor3};
use contextdet::detection::{
    assign_targets, decode_video, focal_loss, iou_loss, total_loss, ActionSegment, DecodeConfig, HeadOutputs,
    HeadValues, LossConfig, PyramidShape, VideoSegment,
};
use contextdet::eval::{average_precision, evaluate, match_predictions, soft_nms, tiou, NmsMethod, SoftNmsConfig};
use contextdet::gradcheck::check_input;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn tiou_matches_set_oracle_exactly_on_grid() {
    let mut r = rng(1);
    for _ in 0..2000 {
        let a = grid_interval(&mut r, 20, 10);
        let b = grid_interval(&mut r, 20, 10);
        assert_eq!(tiou(a, b).unwrap(), tiou_oracle(a, b), "{a:?} {b:?}");
    }
}

#[test]
fn tiou_matches_set_oracle_on_reals() {
    let mut r = rng(2);
    for _ in 0..2000 {
        let s: f64 = r.random_range(0.0..10.0);
        let a = (s, s + r.random_range(0.01..5.0));
        let s: f64 = r.random_range(0.0..10.0);
        let b = (s, s + r.random_range(0.01..5.0));
        assert!((tiou(a, b).unwrap() - tiou_oracle(a, b)).abs() < 1e-12);
    }
}

#[test]
fn giou_matches_set_oracle() {
    let mut r = rng(3);
    for _ in 0..2000 {
        let p = (r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let t = (r.random_range(0.0..5.0), r.random_range(0.05..5.0));
        let got = iou_loss(p, t).unwrap();
        assert!((got - giou_oracle(p, t)).abs() < 1e-12, "{p:?} {t:?}");
    }
    assert!((iou_loss((1.0, 1.0), (1.0, 3.0)).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn focal_matches_scalar_oracle() {
    let mut r = rng(4);
    for _ in 0..500 {
        let logits: Vec<f64> = (0..3).map(|_| r.random_range(-6.0..6.0)).collect();
        let target = [None, Some(0), Some(1), Some(2)][r.random_range(0..4)];
        let gamma = r.random_range(0.0..3.0);
        let alpha = r.random_range(0.05..0.95);
        let got = focal_loss(&logits, target, gamma, alpha);
        assert!((got - focal_oracle(&logits, target, gamma, alpha)).abs() < 1e-10);
    }
}

#[test]
fn focal_graph_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let x = SeqTensor::dense(Tensor3::from_fn([2, 3, 6], |_, _, _| r.random_range(-3.0..3.0)));
    let mut targets = Tensor3::zeros([2, 3, 6]);
    targets.set(0, 1, 2, 1.0);
    targets.set(1, 0, 4, 1.0);
    let weights: Vec<f64> = (0..12).map(|i| 0.1 + 0.05 * i as f64).collect();
    let err = check_input(
        &x,
        |g, v| g.focal_loss(v, targets.clone(), weights.clone(), 2.0, 0.25),
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn soft_nms_matches_reference_exactly() {
    let mut r = rng(6);
    for case in 0..200 {
        let n = r.random_range(0..=20);
        let segs: Vec<ActionSegment> = (0..n)
            .map(|_| {
                let (s, e) = grid_interval(&mut r, 16, 8);
                ActionSegment::new(s, e, r.random_range(0..3), r.random_range(0.0..1.0))
            })
            .collect();
        let cfg = SoftNmsConfig {
            method: if case % 2 == 0 { NmsMethod::Gaussian } else { NmsMethod::Linear },
            max_keep: r.random_range(1..=25),
            score_floor: [0.0, 0.001, 0.2][case % 3],
            ..SoftNmsConfig::default()
        };
        assert_eq!(soft_nms(&segs, &cfg), soft_nms_oracle(&segs, &cfg), "case {case}");
    }
}

#[test]
fn identical_pair_decays_by_exp_minus_two() {
    let s = ActionSegment::new(0.0, 4.0, 0, 0.9);
    let out = soft_nms(&[s, s], &SoftNmsConfig::default());
    assert_eq!(out[1].score, 0.9 * (-1.0f64 / 0.5).exp());
}

fn vs(s: f64, e: f64, c: usize, score: f64) -> VideoSegment {
    VideoSegment::new("v", ActionSegment::new(s, e, c, score))
}

#[test]
fn five_prediction_hand_case_matches_exhaustive_matching() {
    let gts = vec![vs(0.0, 10.0, 0, 1.0), vs(12.0, 20.0, 0, 1.0), vs(30.0, 40.0, 0, 1.0)];
    let preds = vec![
        vs(0.0, 9.0, 0, 0.95),
        vs(1.0, 10.0, 0, 0.9),
        vs(12.0, 21.0, 0, 0.8),
        vs(50.0, 60.0, 0, 0.7),
        vs(30.0, 38.0, 0, 0.6),
    ];
    let flags = exhaustive_match(&preds, &gts, 0.5);
    assert_eq!(flags, vec![true, false, true, false, true]);
    assert_eq!(match_predictions(&preds, &gts, 0.5), flags);
    let expected = ap_from_flags(&flags, 3);
    // recall steps 1/3 at precision 1, 2/3 at 2/3, 1 at 3/5
    assert!((expected - (1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0) + (1.0 / 3.0) * 0.6)).abs() < 1e-15);
    assert!((average_precision(&preds, &gts, 0.5).unwrap() - expected).abs() < 1e-12);
}

fn random_instance(r: &mut ChaCha8Rng) -> (Vec<VideoSegment>, Vec<VideoSegment>) {
    let videos = ["a", "b"];
    let n_gt = r.random_range(1..=8);
    let gts: Vec<VideoSegment> = (0..n_gt)
        .map(|_| {
            let (s, e) = grid_interval(r, 12, 6);
            VideoSegment::new(videos[r.random_range(0..2)], ActionSegment::ground_truth(s, e, r.random_range(0..3)))
        })
        .collect();
    let n_pred = r.random_range(0..=12);
    let preds = (0..n_pred)
        .map(|_| {
            // half the predictions jitter a ground truth, the rest are random
            let (s, e) = if r.random_bool(0.5) {
                let g = &gts[r.random_range(0..gts.len())].segment;
                let js = r.random_range(-8..=8) as f64 / 8.0;
                let je = r.random_range(-8..=8) as f64 / 8.0;
                let s = (g.start + js).max(0.0);
                (s, (g.end + je).max(s + 0.125))
            } else {
                grid_interval(r, 12, 6)
            };
            VideoSegment::new(
                videos[r.random_range(0..2)],
                ActionSegment::new(s, e, r.random_range(0..3), r.random_range(0.0..1.0)),
            )
        })
        .collect();
    (preds, gts)
}

#[test]
fn average_precision_matches_exhaustive_oracle() {
    let mut r = rng(7);
    for case in 0..300 {
        let (preds, gts) = random_instance(&mut r);
        for c in 0..3 {
            let p: Vec<VideoSegment> = preds.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            let g: Vec<VideoSegment> = gts.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            for t in [0.1, 0.3, 0.5, 0.7] {
                assert_eq!(match_predictions(&p, &g, t), exhaustive_match(&p, &g, t), "case {case}");
                match average_precision(&p, &g, t) {
                    None => assert!(g.is_empty()),
                    Some(ap) => assert!((ap - ap_from_flags(&exhaustive_match(&p, &g, t), g.len())).abs() < 1e-9),
                }
            }
        }
    }
}

#[test]
fn evaluate_matches_oracle_on_random_three_class_instances() {
    let mut r = rng(8);
    let thresholds = [0.3, 0.5, 0.7];
    for _ in 0..150 {
        let (preds, gts) = random_instance(&mut r);
        let report = evaluate(&preds, &gts, &thresholds).unwrap();
        let oracle = map_oracle(&preds, &gts, &thresholds);
        for (got, want) in report.thresholds.iter().zip(&oracle) {
            assert!((got.map - want).abs() < 1e-9);
        }
        let avg = oracle.iter().sum::<f64>() / 3.0;
        assert!((report.average_map - avg).abs() < 1e-9);
    }
}

#[test]
fn assignment_matches_brute_force() {
    let mut r = rng(9);
    for case in 0..200 {
        let levels = r.random_range(1..=4);
        let pad = 1 << (levels - 1);
        let batch = r.random_range(1..=3);
        let lens: Vec<usize> = (0..batch).map(|_| r.random_range(4..=40)).collect();
        let padded = lens.iter().max().unwrap().div_ceil(pad) * pad;
        let shape = PyramidShape::new(levels, padded, &lens);
        let gts: Vec<Vec<ActionSegment>> = lens.iter().map(|&t| random_gt(&mut r, t, 3, 5)).collect();
        let cfg = LossConfig {
            center_sampling_radius: [1.5, 0.5, 3.0][case % 3],
            ..LossConfig::default()
        };
        let got = assign_targets(&gts, &shape, &cfg, 3).unwrap();
        for (b, segs) in gts.iter().enumerate() {
            let want = assign_oracle(segs, &shape, b, &cfg);
            for li in 0..levels {
                let t_pad = shape.padded[li];
                let lt = &got.levels[li];
                let s = (1u64 << li) as f64;
                for t in 0..t_pad {
                    assert_eq!(lt.matched[b * t_pad + t], want[li][t], "case {case} b {b} level {li} t {t}");
                    if let Some(u) = want[li][t] {
                        let g = &segs[u];
                        let x = s * t as f64;
                        assert_eq!(lt.offsets.get(b, 0, t), (x - g.start) / s);
                        assert_eq!(lt.offsets.get(b, 1, t), (g.end - x) / s);
                        for c in 0..3 {
                            assert_eq!(lt.classes.get(b, c, t), f64::from(c == g.class_id));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn level_one_offsets_follow_direct_formula() {
    let cfg = LossConfig {
        center_sampling_radius: 8.0,
        ..LossConfig::default()
    };
    let shape = PyramidShape::new(1, 16, &[16]);
    let t = assign_targets(&[vec![ActionSegment::ground_truth(0.0, 8.0, 0)]], &shape, &cfg, 1).unwrap();
    let lvl = &t.levels[0];
    assert_eq!((lvl.offsets.get(0, 0, 4), lvl.offsets.get(0, 1, 4)), (4.0, 4.0));
}

/// Every (level, position, class) candidate, filtered, clamped and ranked.
fn decode_oracle(values: &HeadValues, b: usize, cfg: &DecodeConfig) -> Vec<ActionSegment> {
    let t0 = values.valid[b][0] as f64;
    let mut all = Vec::new();
    for li in 0..values.class_logits.len() {
        let scale = values.strides[li] as f64;
        for t in 0..values.valid[b][li] {
            for c in 0..values.class_logits[li].dims()[1] {
                let score = scalar::sigmoid(values.class_logits[li].get(b, c, t));
                let start = f64::max(0.0, scale * (t as f64 - values.offsets[li].get(b, 0, t)));
                let end = f64::min(t0, scale * (t as f64 + values.offsets[li].get(b, 1, t)));
                if score >= cfg.score_threshold && end > start {
                    all.push(ActionSegment::new(start, end, c, score));
                }
            }
        }
    }
    // stable: ties keep enumeration order
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    all.into_iter().take(cfg.pre_nms_topk).collect()
}

#[test]
fn decode_matches_enumeration_oracle() {
    let mut r = rng(10);
    for case in 0..100 {
        let lens = [16usize, 8];
        let values = HeadValues {
            class_logits: lens
                .iter()
                .map(|&t| Tensor3::from_fn([2, 3, t], |_, _, _| r.random_range(-4.0..4.0)))
                .collect(),
            offsets: lens
                .iter()
                .map(|&t| Tensor3::from_fn([2, 2, t], |_, _, _| r.random_range(0.0..6.0)))
                .collect(),
            strides: vec![1, 2],
            valid: vec![vec![16, 8], vec![11, 6]],
        };
        let cfg = DecodeConfig {
            score_threshold: [0.0, 0.3, 0.8][case % 3],
            pre_nms_topk: [1000, 10, 1][case % 3],
        };
        for b in 0..2 {
            assert_eq!(decode_video(&values, b, &cfg), decode_oracle(&values, b, &cfg));
        }
    }
}

#[test]
fn decode_direct_examples() {
    let make = |stride: usize, t: usize, ds: f64, de: f64| {
        let mut logits = Tensor3::filled([1, 1, 32], -40.0);
        logits.set(0, 0, t, 4.0);
        let mut offsets = Tensor3::zeros([1, 2, 32]);
        offsets.set(0, 0, t, ds);
        offsets.set(0, 1, t, de);
        let values = HeadValues {
            class_logits: vec![logits],
            offsets: vec![offsets],
            strides: vec![stride],
            valid: vec![vec![32]],
        };
        let cfg = DecodeConfig {
            score_threshold: 0.5,
            pre_nms_topk: 5,
        };
        let s = decode_video(&values, 0, &cfg)[0];
        (s.start, s.end)
    };
    assert_eq!(make(1, 10, 2.0, 3.0), (8.0, 13.0));
    assert_eq!(make(4, 5, 1.0, 2.0), (16.0, 28.0));
}

/// Loss of a two-video toy batch written out position by position.
#[test]
fn total_loss_matches_straight_line_oracle() {
    let mut r = rng(11);
    let cfg = LossConfig::default();
    let lens = [16usize, 11];
    let shape = PyramidShape::new(2, 16, &lens);
    let gts = vec![
        vec![ActionSegment::ground_truth(2.0, 9.0, 1), ActionSegment::ground_truth(10.0, 13.5, 0)],
        vec![ActionSegment::ground_truth(3.0, 7.0, 2)],
    ];
    let targets = assign_targets(&gts, &shape, &cfg, 3).unwrap();
    assert!(targets.num_pos.iter().all(|&n| n > 0));

    let logits: Vec<Tensor3> = shape
        .padded
        .iter()
        .map(|&t| Tensor3::from_fn([2, 3, t], |_, _, _| r.random_range(-3.0..3.0)))
        .collect();
    let offsets: Vec<Tensor3> = shape
        .padded
        .iter()
        .map(|&t| Tensor3::from_fn([2, 2, t], |_, _, _| r.random_range(0.1..4.0)))
        .collect();

    let mut g = Graph::new();
    let mut outputs = HeadOutputs {
        class_logits: vec![],
        offsets: vec![],
        strides: shape.strides.clone(),
    };
    for li in 0..2 {
        let valid: Vec<usize> = (0..2).map(|b| shape.valid[b][li]).collect();
        let mask = Mask::new(valid, shape.padded[li]).unwrap();
        let mut l = logits[li].clone();
        let mut o = offsets[li].clone();
        mask.apply(&mut l);
        mask.apply(&mut o);
        outputs.class_logits.push(g.constant(l, Some(mask.clone())));
        outputs.offsets.push(g.constant(o, Some(mask)));
    }
    let loss = total_loss(&mut g, &outputs, &targets, &cfg).unwrap();
    let got = g.value(loss).item();

    let mut want = 0.0;
    for b in 0..2 {
        let (mut pos_sum, mut neg_sum, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
        for li in 0..2 {
            let stride = shape.strides[li] as f64;
            for t in 0..shape.valid[b][li] {
                let x = stride * t as f64;
                let ls: Vec<f64> = (0..3).map(|c| logits[li].get(b, c, t)).collect();
                let matched = assign_oracle(&gts[b], &shape, b, &cfg)[li][t];
                match matched {
                    Some(u) => {
                        let seg = &gts[b][u];
                        let target = ((x - seg.start) / stride, (seg.end - x) / stride);
                        let pred = (offsets[li].get(b, 0, t), offsets[li].get(b, 1, t));
                        let quality = tiou_oracle((x - pred.0 * stride, x + pred.1 * stride), (seg.start, seg.end));
                        pos_sum += quality * focal_oracle(&ls, Some(seg.class_id), cfg.focal_gamma, cfg.focal_alpha)
                            + cfg.lambda_reg * giou_oracle(pred, target);
                        n_pos += 1;
                    }
                    None => {
                        neg_sum += focal_oracle(&ls, None, cfg.focal_gamma, cfg.focal_alpha);
                        n_neg += 1;
                    }
                }
            }
        }
        want += pos_sum / n_pos as f64 + neg_sum / n_neg as f64;
    }
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}
