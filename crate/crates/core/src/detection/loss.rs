use super::assign::{AssignmentTargets, LossConfig};
use super::head::HeadOutputs;
use crate::autodiff::{kernels, Graph, Tensor3, Var};
use crate::{Error, Result};

/// Sigmoid focal loss at one position, summed over classes.
/// `target` is the positive class, `None` for background.
pub fn focal_loss(logits: &[f64], target: Option<usize>, gamma: f64, alpha: f64) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(c, &l)| kernels::focal(l, f64::from(target == Some(c)), gamma, alpha).0)
        .sum()
}

/// 1D GIoU loss between offset pairs `(start, end)` anchored at the same
/// position.
pub fn iou_loss(pred: (f64, f64), target: (f64, f64)) -> Result<f64> {
    if target.0 + target.1 <= 0.0 {
        return Err(Error::InvalidArgument("zero-length target interval".into()));
    }
    if pred.0 < 0.0 || pred.1 < 0.0 || target.0 < 0.0 || target.1 < 0.0 {
        return Err(Error::InvalidArgument("offsets must be nonnegative".into()));
    }
    Ok(kernels::giou(pred.0, pred.1, target.0, target.1).0)
}

/// IoU of two intervals sharing an anchor, given as offset pairs.
fn offset_iou(pred: (f64, f64), target: (f64, f64)) -> f64 {
    let inter = pred.0.min(target.0) + pred.1.min(target.1);
    let union = pred.0 + pred.1 + target.0 + target.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-position tIoU between the decoded prediction and its target, used
/// as a constant weight on the positive classification term.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityWeights {
    /// `[level][b * T_i + t]`, zero at non-positives.
    pub levels: Vec<Vec<f64>>,
}

impl QualityWeights {
    pub fn from_values(offsets: &[Tensor3], targets: &AssignmentTargets) -> Self {
        let levels = targets
            .levels
            .iter()
            .zip(offsets)
            .map(|(lt, off)| {
                let [batch, _, t] = off.dims();
                let mut w = vec![0.0; batch * t];
                for b in 0..batch {
                    for ti in 0..t {
                        if lt.matched[b * t + ti].is_some() {
                            let pred = (off.get(b, 0, ti), off.get(b, 1, ti));
                            let tgt = (lt.offsets.get(b, 0, ti), lt.offsets.get(b, 1, ti));
                            w[b * t + ti] = offset_iou(pred, tgt);
                        }
                    }
                }
                w
            })
            .collect();
        Self { levels }
    }

    pub fn from_outputs(g: &Graph, outputs: &HeadOutputs, targets: &AssignmentTargets) -> Self {
        let offsets: Vec<Tensor3> = outputs.offsets.iter().map(|&v| g.value(v).clone()).collect();
        Self::from_values(&offsets, targets)
    }
}

/// Training loss, summed over the videos of the batch; each video's term is
/// normalized by its own positive and negative counts.
pub fn total_loss(
    g: &mut Graph,
    outputs: &HeadOutputs,
    targets: &AssignmentTargets,
    cfg: &LossConfig,
) -> Result<Var> {
    let quality = QualityWeights::from_outputs(g, outputs, targets);
    total_loss_weighted(g, outputs, targets, cfg, &quality)
}

/// [`total_loss`] with externally fixed quality weights.
pub fn total_loss_weighted(
    g: &mut Graph,
    outputs: &HeadOutputs,
    targets: &AssignmentTargets,
    cfg: &LossConfig,
    quality: &QualityWeights,
) -> Result<Var> {
    if outputs.num_levels() != targets.levels.len() {
        return Err(Error::InvalidArgument("head outputs and targets disagree on levels".into()));
    }
    let mut terms = Vec::new();
    for (li, lt) in targets.levels.iter().enumerate() {
        let logits = outputs.class_logits[li];
        let [batch, _, t] = g.dims(logits);
        if lt.classes.dims() != g.dims(logits) {
            return Err(Error::InvalidArgument(format!(
                "level {li}: targets {:?} vs logits {:?}",
                lt.classes.dims(),
                g.dims(logits)
            )));
        }
        let mut cls_w = vec![0.0; batch * t];
        let mut reg_w = vec![0.0; batch * t];
        let mut any_reg = false;
        for b in 0..batch {
            let pos = targets.num_pos[b];
            let neg = targets.num_neg[b];
            for ti in 0..t {
                let i = b * t + ti;
                if !lt.valid[i] {
                    continue;
                }
                if lt.matched[i].is_some() {
                    let inv = 1.0 / pos as f64;
                    cls_w[i] = quality.levels[li][i] * inv;
                    reg_w[i] = cfg.lambda_reg * inv;
                    any_reg |= reg_w[i] != 0.0;
                } else if neg > 0 {
                    cls_w[i] = 1.0 / neg as f64;
                }
            }
        }
        terms.push(g.focal_loss(
            logits,
            lt.classes.clone(),
            cls_w,
            cfg.focal_gamma,
            cfg.focal_alpha,
        )?);
        if any_reg {
            terms.push(g.giou_loss(outputs.offsets[li], lt.offsets.clone(), reg_w)?);
        }
    }
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => return Ok(g.constant(Tensor3::scalar(0.0), None)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_confident_prediction_vanishes() {
        assert!(focal_loss(&[30.0, -30.0], Some(0), 2.0, 0.25) < 1e-12);
        assert!(focal_loss(&[-30.0, -30.0], None, 2.0, 0.25) < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_half_cross_entropy() {
        for &l in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let p: f64 = 1.0 / (1.0 + (-l as f64).exp());
            let ce_pos = -p.ln();
            let ce_neg = -(1.0 - p).ln();
            assert!((focal_loss(&[l], Some(0), 0.0, 0.5) - 0.5 * ce_pos).abs() < 1e-12);
            assert!((focal_loss(&[l], None, 0.0, 0.5) - 0.5 * ce_neg).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_loss_examples() {
        assert_eq!(iou_loss((2.0, 3.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!((iou_loss((1.0, 1.0), (1.0, 3.0)).unwrap() - 0.5).abs() < 1e-15);
        assert!(iou_loss((1.0, 1.0), (0.0, 0.0)).is_err());
    }
}
