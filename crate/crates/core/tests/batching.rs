mod common;

use common::{batching_equivalence, small_run_config};
use contextdet::data::{collate, generate_synthetic, make_batches, padded_length};
use contextdet::model::ContextDet;
use contextdet::train::{evaluate_model, predict, predict_batch, train};

#[test]
fn padded_batch_loss_is_sum_of_unbatched_losses() {
    let cfg = small_run_config();
    let records = generate_synthetic(&cfg.data.synthetic).unwrap();
    assert!(records.windows(2).any(|w| w[0].time() != w[1].time()));
    for seed in 0..3 {
        let model = ContextDet::new(cfg.model.clone(), seed).unwrap();
        let (gap, same) = batching_equivalence(&model, &records, &cfg);
        assert!(gap.abs() < 1e-9, "seed {seed}: {gap}");
        assert!(same, "seed {seed}: predictions differ");
    }
}

#[test]
fn equivalence_holds_after_training() {
    let cfg = small_run_config();
    let records = generate_synthetic(&cfg.data.synthetic).unwrap();
    let out = train(&cfg, &records, &[], |_| {}).unwrap();
    let (gap, same) = batching_equivalence(&out.last, &records, &cfg);
    assert!(gap.abs() < 1e-9 && same);
}

#[test]
fn batched_inference_gives_same_metrics() {
    let cfg = small_run_config();
    let records = generate_synthetic(&cfg.data.synthetic).unwrap();
    let model = ContextDet::new(cfg.model.clone(), 4).unwrap();
    let pad = model.config().pad_multiple();
    let mut batched = Vec::new();
    for batch in make_batches(&records, 4, pad, None).unwrap() {
        for (k, segs) in predict_batch(&model, &batch, &cfg.eval).unwrap().into_iter().enumerate() {
            let id = &batch.video_ids[k];
            batched.extend(segs.into_iter().map(|s| contextdet::detection::VideoSegment::new(id.clone(), s)));
        }
    }
    assert_eq!(batched, predict(&model, &records, &cfg.eval).unwrap());
    let gts = contextdet::data::ground_truth(&records);
    let a = contextdet::eval::evaluate(&batched, &gts, &cfg.eval.thresholds).unwrap();
    assert_eq!(a, evaluate_model(&model, &records, &cfg.eval).unwrap());
}

#[test]
fn padding_examples() {
    assert_eq!(padded_length(30, 32), 32);
    assert_eq!(padded_length(17, 32), 32);
    let cfg = small_run_config();
    let records = generate_synthetic(&cfg.data.synthetic).unwrap();
    let one = collate(&records, &[0], 1).unwrap();
    assert_eq!(one.padded_len(), records[0].time());
}
