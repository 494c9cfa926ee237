//! Center-sampling label assignment.
//!
//! Position `t` of level `i` sits at input-timeline coordinate `x = s*t`
//! with `s = 2^(i-1)`. It is a positive for ground-truth segment `u` when
//!
//! * `start_u <= x <= end_u`,
//! * `|x - center_u| <= radius * s`, and
//! * `max(x - start_u, end_u - x)` falls in the level's regression range
//!   `[lo, hi)`, measured in stride-1 steps.
//!
//! If several segments qualify the shortest wins, then the lowest index.

use serde::{Deserialize, Serialize};

use super::segment::ActionSegment;
use crate::autodiff::Tensor3;
use crate::{Error, Result};

/// Loss weights and label-assignment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda_reg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Center sampling radius in units of the level stride.
    pub center_sampling_radius: f64,
    /// Upper bounds of the per-level regression ranges, in stride-1 steps,
    /// one per level except the last, which is open ended. Empty selects
    /// `4, 8, 16, ...`.
    pub regression_bounds: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            center_sampling_radius: 1.5,
            regression_bounds: Vec::new(),
        }
    }
}

impl LossConfig {
    /// `[lo, hi)` ranges for a pyramid of `levels`.
    pub fn ranges(&self, levels: usize) -> Vec<(f64, f64)> {
        if self.regression_bounds.is_empty() {
            return default_ranges(levels);
        }
        let mut out = Vec::with_capacity(levels);
        let mut lo = 0.0;
        for &hi in &self.regression_bounds {
            out.push((lo, hi));
            lo = hi;
        }
        out.push((lo, f64::INFINITY));
        out
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if !self.regression_bounds.is_empty() {
            if self.regression_bounds.len() + 1 != levels {
                return Err(Error::Config(format!(
                    "{} regression bounds for {levels} pyramid levels, expected {}",
                    self.regression_bounds.len(),
                    levels.saturating_sub(1)
                )));
            }
            let mut lo = 0.0;
            for &hi in &self.regression_bounds {
                if !(hi > lo) || !hi.is_finite() {
                    return Err(Error::Config("regression bounds must be finite and increasing from 0".into()));
                }
                lo = hi;
            }
        }
        if !(self.center_sampling_radius > 0.0) || !(self.lambda_reg >= 0.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("invalid loss hyperparameters".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `(0,4), (4,8), (8,16), ...` with the last level open ended.
pub fn default_ranges(levels: usize) -> Vec<(f64, f64)> {
    let mut ranges = Vec::with_capacity(levels);
    let mut lo = 0.0;
    for i in 0..levels {
        let hi = if i + 1 == levels {
            f64::INFINITY
        } else {
            4.0 * f64::from(1u32 << i)
        };
        ranges.push((lo, hi));
        lo = hi;
    }
    ranges
}

/// Padded and valid lengths of every pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidShape {
    pub strides: Vec<usize>,
    /// Padded length of each level (shared by the batch).
    pub padded: Vec<usize>,
    /// `valid[b][level]`.
    pub valid: Vec<Vec<usize>>,
}

impl PyramidShape {
    pub fn new(levels: usize, padded_t0: usize, valid_t0: &[usize]) -> Self {
        let halve = |t0: usize| {
            let mut out = Vec::with_capacity(levels);
            let mut t = t0;
            for i in 0..levels {
                if i > 0 {
                    t = t.div_ceil(2);
                }
                out.push(t);
            }
            out
        };
        Self {
            strides: (0..levels).map(|i| 1 << i).collect(),
            padded: halve(padded_t0),
            valid: valid_t0.iter().map(|&t| halve(t)).collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }
}

/// Targets of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// One-hot class targets `(B, U, T_i)`; all zero at negatives.
    pub classes: Tensor3,
    /// `(start, end)` offsets in stride units `(B, 2, T_i)`; zero at negatives.
    pub offsets: Tensor3,
    /// Index into the video's ground truth for positives, `[b * T_i + t]`.
    pub matched: Vec<Option<usize>>,
    /// Whether the position is a valid (unpadded) step.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTargets {
    pub levels: Vec<LevelTargets>,
    /// Positives per video over all levels.
    pub num_pos: Vec<usize>,
    /// Valid non-positive positions per video over all levels.
    pub num_neg: Vec<usize>,
    pub strides: Vec<usize>,
}

impl AssignmentTargets {
    pub fn total_pos(&self) -> usize {
        self.num_pos.iter().sum()
    }
}

/// Assigns every valid position of every level to at most one segment.
pub fn assign_targets(
    gts: &[Vec<ActionSegment>],
    shape: &PyramidShape,
    cfg: &LossConfig,
    num_classes: usize,
) -> Result<AssignmentTargets> {
    cfg.validate(shape.levels())?;
    if gts.len() != shape.batch() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth lists for a batch of {}",
            gts.len(),
            shape.batch()
        )));
    }
    for seg in gts.iter().flatten() {
        seg.validate(num_classes)?;
    }
    let batch = gts.len();
    let mut num_pos = vec![0; batch];
    let mut num_neg = vec![0; batch];
    let ranges = cfg.ranges(shape.levels());
    let mut levels = Vec::with_capacity(shape.levels());
    for (li, (&stride, &t_pad)) in shape.strides.iter().zip(&shape.padded).enumerate() {
        let s = stride as f64;
        let (lo, hi) = ranges[li];
        let mut classes = Tensor3::zeros([batch, num_classes, t_pad]);
        let mut offsets = Tensor3::zeros([batch, 2, t_pad]);
        let mut matched = vec![None; batch * t_pad];
        let mut valid = vec![false; batch * t_pad];
        for (b, segs) in gts.iter().enumerate() {
            let t_valid = shape.valid[b][li];
            for t in 0..t_valid {
                valid[b * t_pad + t] = true;
                let x = s * t as f64;
                let mut best: Option<(usize, f64)> = None;
                for (u, seg) in segs.iter().enumerate() {
                    if x < seg.start || x > seg.end {
                        continue;
                    }
                    if (x - seg.center()).abs() > cfg.center_sampling_radius * s {
                        continue;
                    }
                    let reach = (x - seg.start).max(seg.end - x);
                    if reach < lo || reach >= hi {
                        continue;
                    }
                    let len = seg.length();
                    if best.is_none_or(|(_, l)| len < l) {
                        best = Some((u, len));
                    }
                }
                match best {
                    Some((u, _)) => {
                        let seg = &segs[u];
                        matched[b * t_pad + t] = Some(u);
                        classes.set(b, seg.class_id, t, 1.0);
                        offsets.set(b, 0, t, (x - seg.start) / s);
                        offsets.set(b, 1, t, (seg.end - x) / s);
                        num_pos[b] += 1;
                    }
                    None => num_neg[b] += 1,
                }
            }
        }
        levels.push(LevelTargets {
            classes,
            offsets,
            matched,
            valid,
        });
    }
    Ok(AssignmentTargets {
        levels,
        num_pos,
        num_neg,
        strides: shape.strides.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ranges_cover_half_line() {
        let r = default_ranges(6);
        assert_eq!(r[0], (0.0, 4.0));
        assert_eq!(r[4], (32.0, 64.0));
        assert_eq!(r[5], (64.0, f64::INFINITY));
        let cfg = LossConfig {
            regression_bounds: vec![2.0, 6.0],
            ..LossConfig::default()
        };
        assert_eq!(cfg.ranges(3), vec![(0.0, 2.0), (2.0, 6.0), (6.0, f64::INFINITY)]);
        assert!(cfg.validate(3).is_ok());
        assert!(cfg.validate(4).is_err());
        assert!(LossConfig::default().validate(4).is_ok());
    }

    #[test]
    fn empty_ground_truth_is_all_negative() {
        let shape = PyramidShape::new(3, 16, &[16]);
        let t = assign_targets(&[vec![]], &shape, &LossConfig::default(), 2).unwrap();
        assert_eq!(t.num_pos, vec![0]);
        assert_eq!(t.num_neg, vec![16 + 8 + 4]);
    }

    #[test]
    fn centre_position_gets_symmetric_offsets() {
        let shape = PyramidShape::new(3, 16, &[16]);
        let gt = vec![ActionSegment::ground_truth(0.0, 8.0, 1)];
        let t = assign_targets(&[gt], &shape, &LossConfig::default(), 2).unwrap();
        // reach 4 at x = 4 falls in level 2's range [4, 8)
        let lvl = &t.levels[1];
        assert_eq!(lvl.matched[2], Some(0));
        assert_eq!((lvl.offsets.get(0, 0, 2), lvl.offsets.get(0, 1, 2)), (2.0, 2.0));
        assert_eq!(lvl.classes.get(0, 1, 2), 1.0);
    }

    #[test]
    fn level_one_direct_formula() {
        // a wide radius and a single open range put everything on level 1
        let cfg = LossConfig {
            center_sampling_radius: 10.0,
            ..LossConfig::default()
        };
        let shape = PyramidShape::new(1, 10, &[10]);
        let gt = vec![ActionSegment::ground_truth(0.0, 8.0, 0)];
        let t = assign_targets(&[gt], &shape, &cfg, 1).unwrap();
        let lvl = &t.levels[0];
        assert_eq!((lvl.offsets.get(0, 0, 4), lvl.offsets.get(0, 1, 4)), (4.0, 4.0));
        assert_eq!(t.num_pos[0], 9);
        assert_eq!(t.num_pos[0] + t.num_neg[0], 10);
    }

    #[test]
    fn shortest_segment_wins() {
        let cfg = LossConfig {
            center_sampling_radius: 100.0,
            ..LossConfig::default()
        };
        let shape = PyramidShape::new(1, 20, &[20]);
        let gt = vec![
            ActionSegment::ground_truth(0.0, 19.0, 0),
            ActionSegment::ground_truth(4.0, 8.0, 1),
        ];
        let t = assign_targets(&[gt], &shape, &cfg, 2).unwrap();
        assert_eq!(t.levels[0].matched[5], Some(1));
        assert_eq!(t.levels[0].matched[12], Some(0));
    }
}
