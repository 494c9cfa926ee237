//! Training loop and inference.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph};
use crate::data::{collate, ground_truth, lr_schedule, make_batches, Batch, EvalConfig, RunConfig, VideoRecord};
use crate::detection::{decode_video, total_loss, ActionSegment, VideoSegment};
use crate::eval::{evaluate, soft_nms, EvalReport};
use crate::model::{save_checkpoint, ContextDet};
use crate::{Error, Result};

/// Loss of one batch: the sum of the per-video losses.
pub fn batch_loss(model: &ContextDet, batch: &Batch, cfg: &RunConfig) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.features)?;
    let targets = batch.targets(model.config().pyramid_levels, &cfg.loss, model.config().num_classes)?;
    let loss = total_loss(&mut g, &out, &targets, &cfg.loss)?;
    Ok(g.value(loss).item())
}

/// Forward, backward and one optimizer step on `batch`. Returns the summed
/// per-video loss before the update.
pub fn train_step(model: &mut ContextDet, batch: &Batch, cfg: &RunConfig, lr: f64) -> Result<f64> {
    let levels = model.config().pyramid_levels;
    let num_classes = model.config().num_classes;
    let targets = batch.targets(levels, &cfg.loss, num_classes)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.features)?;
    let loss = total_loss(&mut g, &out, &targets, &cfg.loss)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::State(format!("loss became {value}")));
    }
    let mean = g.scale(loss, 1.0 / batch.indices.len() as f64);
    g.backward(mean)?;
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate_grads(&g)?;
    let clip = cfg.optim.grad_clip;
    if clip > 0.0 {
        let norm = params.grad_norm();
        if norm > clip {
            params.scale_grads(clip / norm);
        }
    }
    params.adamw_step(&AdamW {
        lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    })?;
    Ok(value)
}

/// Decoded and suppressed predictions of every video in `batch`.
pub fn predict_batch(model: &ContextDet, batch: &Batch, cfg: &EvalConfig) -> Result<Vec<Vec<ActionSegment>>> {
    let mut g = Graph::new();
    let values = model.forward(&mut g, &batch.features)?.values(&g);
    Ok((0..batch.indices.len())
        .map(|b| soft_nms(&decode_video(&values, b, &cfg.decode), &cfg.nms))
        .collect())
}

/// Predictions for every record, one video at a time, in parallel.
pub fn predict(model: &ContextDet, records: &[VideoRecord], cfg: &EvalConfig) -> Result<Vec<VideoSegment>> {
    let pad = model.config().pad_multiple();
    let per_video: Vec<Vec<VideoSegment>> = (0..records.len())
        .into_par_iter()
        .map(|i| {
            let batch = collate(records, &[i], pad)?;
            let segs = predict_batch(model, &batch, cfg)?.remove(0);
            Ok(segs
                .into_iter()
                .map(|s| VideoSegment::new(records[i].video_id.clone(), s))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn evaluate_model(model: &ContextDet, records: &[VideoRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predict(model, records, cfg)?;
    evaluate(&preds, &ground_truth(records), &cfg.thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean per-video training loss over the epoch.
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best evaluation (the initial model if none ran).
    pub best: ContextDet,
    pub best_epoch: usize,
    pub last: ContextDet,
    pub history: Vec<EpochMetrics>,
}

/// `epoch,lr,train_loss,average_map,map@t...`; evaluation columns stay
/// empty on epochs without evaluation.
pub fn metrics_csv(history: &[EpochMetrics], thresholds: &[f64]) -> String {
    let mut out = String::from("epoch,lr,train_loss,average_map");
    for t in thresholds {
        let _ = write!(out, ",map@{t:.2}");
    }
    out.push('\n');
    for m in history {
        let _ = write!(out, "{},{:.9e},{:.12}", m.epoch, m.lr, m.train_loss);
        match &m.eval {
            Some(r) => {
                let _ = write!(out, ",{:.12}", r.average_map);
                for t in &r.thresholds {
                    let _ = write!(out, ",{:.12}", t.map);
                }
            }
            None => out.push_str(&",".repeat(thresholds.len() + 1)),
        }
        out.push('\n');
    }
    out
}

/// Trains from a fresh model seeded with `cfg.seed`.
///
/// The best checkpoint is chosen by average mAP on `val`, or on `train`
/// when `val` is empty. `on_epoch` sees every epoch's metrics as they come.
pub fn train(
    cfg: &RunConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("no training videos".into()));
    }
    if let Some(r) = train.iter().chain(val).find(|r| r.input_dim() != cfg.model.input_dim) {
        return Err(Error::Config(format!(
            "video {} has feature dim {}, model expects {}",
            r.video_id,
            r.input_dim(),
            cfg.model.input_dim
        )));
    }
    let mut model = ContextDet::new(cfg.model.clone(), cfg.seed)?;
    let pad = cfg.model.pad_multiple();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup_steps = cfg.warmup_epochs * batches_per_epoch;
    let selection = if val.is_empty() { train } else { val };

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_map = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let shuffle = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in make_batches(train, cfg.batch_size, pad, Some(shuffle))? {
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.optim.lr);
            loss_sum += train_step(&mut model, &batch, cfg, lr)?;
            step += 1;
        }
        let eval = if epoch % cfg.eval.every == 0 || epoch == cfg.epochs {
            let report = evaluate_model(&model, selection, &cfg.eval)?;
            if report.average_map > best_map {
                best_map = report.average_map;
                best = model.clone();
                best_epoch = epoch;
            }
            Some(report)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            eval,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

/// Writes `metrics.csv`, `best.ckpt`, `last.ckpt` and `config.json` into
/// `dir`.
pub fn write_run(dir: impl AsRef<Path>, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.history, &cfg.eval.thresholds))?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    save_checkpoint(dir.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(dir.join("last.ckpt"), &outcome.last)?;
    Ok(())
}
