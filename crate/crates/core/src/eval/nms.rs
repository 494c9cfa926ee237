use serde::{Deserialize, Serialize};

use super::tiou_unchecked;
use crate::detection::ActionSegment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMethod {
    Gaussian,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsConfig {
    pub method: NmsMethod,
    /// Gaussian decay width: `exp(-tiou^2 / sigma)`.
    pub sigma: f64,
    /// Linear decay applies only at or above this overlap: `1 - tiou`.
    pub iou_cut: f64,
    pub score_floor: f64,
    pub max_keep: usize,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            method: NmsMethod::Gaussian,
            sigma: 0.5,
            iou_cut: 0.5,
            score_floor: 0.001,
            max_keep: 200,
        }
    }
}

impl SoftNmsConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.sigma > 0.0) || !(0.0..=1.0).contains(&self.iou_cut) || !(self.score_floor >= 0.0) {
            return Err(crate::Error::Config("invalid soft-nms parameters".into()));
        }
        Ok(())
    }

    fn decay(&self, iou: f64) -> f64 {
        match self.method {
            NmsMethod::Gaussian => (-(iou * iou) / self.sigma).exp(),
            NmsMethod::Linear if iou >= self.iou_cut => 1.0 - iou,
            NmsMethod::Linear => 1.0,
        }
    }
}

/// Soft suppression within each class.
///
/// Repeatedly keeps the highest remaining score (earliest on ties), decays
/// the remaining same-class scores by their overlap with it and drops those
/// that fall below the floor. Output is in selection order, which is
/// non-increasing in score.
pub fn soft_nms(segments: &[ActionSegment], cfg: &SoftNmsConfig) -> Vec<ActionSegment> {
    let mut pool: Vec<ActionSegment> = segments
        .iter()
        .copied()
        .filter(|s| s.score >= cfg.score_floor)
        .collect();
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < cfg.max_keep {
        let mut best = 0;
        for (i, s) in pool.iter().enumerate().skip(1) {
            if s.score > pool[best].score {
                best = i;
            }
        }
        let top = pool.remove(best);
        for s in pool.iter_mut().filter(|s| s.class_id == top.class_id) {
            s.score *= cfg.decay(tiou_unchecked((top.start, top.end), (s.start, s.end)));
        }
        pool.retain(|s| s.score >= cfg.score_floor);
        kept.push(top);
    }
    kept
}
