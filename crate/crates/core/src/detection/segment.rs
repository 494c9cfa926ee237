use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A temporal interval with a class and a confidence.
///
/// Times are in stride-1 feature steps unless stated otherwise. Ground
/// truth uses score 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl ActionSegment {
    pub fn new(start: f64, end: f64, class_id: usize, score: f64) -> Self {
        Self {
            start,
            end,
            class_id,
            score,
        }
    }

    pub fn ground_truth(start: f64, end: f64, class_id: usize) -> Self {
        Self::new(start, end, class_id, 1.0)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.start >= self.end {
            return Err(Error::Validation(format!(
                "segment [{}, {}) must satisfy start < end",
                self.start, self.end
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Validation(format!(
                "class id {} outside [0, {num_classes})",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// A segment tagged with the video it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSegment {
    pub video_id: String,
    #[serde(flatten)]
    pub segment: ActionSegment,
}

impl VideoSegment {
    pub fn new(video_id: impl Into<String>, segment: ActionSegment) -> Self {
        Self {
            video_id: video_id.into(),
            segment,
        }
    }
}

/// JSON array of `{video_id, start, end, class_id, score}`, highest score
/// first (stable for ties).
pub fn predictions_to_json(preds: &[VideoSegment]) -> Result<String> {
    let mut sorted: Vec<&VideoSegment> = preds.iter().collect();
    sorted.sort_by(|a, b| b.segment.score.total_cmp(&a.segment.score));
    Ok(serde_json::to_string_pretty(&sorted)?)
}

/// Up to `max` random non-degenerate segments inside `[0, duration]`.
pub fn random_segments(
    rng: &mut impl Rng,
    duration: f64,
    num_classes: usize,
    max: usize,
) -> Vec<ActionSegment> {
    let n = rng.random_range(1..=max.max(1));
    (0..n)
        .map(|_| {
            let len = rng.random_range(1.0..(duration / 2.0).max(1.5));
            let start = rng.random_range(0.0..(duration - len).max(0.5));
            let end = (start + len).min(duration);
            ActionSegment::ground_truth(start, end, rng.random_range(0..num_classes))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ActionSegment::ground_truth(1.0, 2.0, 0).validate(1).is_ok());
        assert!(ActionSegment::ground_truth(2.0, 2.0, 0).validate(1).is_err());
        assert!(ActionSegment::ground_truth(1.0, 2.0, 3).validate(3).is_err());
    }

    #[test]
    fn export_is_sorted_by_score() {
        let preds = vec![
            VideoSegment::new("a", ActionSegment::new(0.0, 1.0, 0, 0.2)),
            VideoSegment::new("b", ActionSegment::new(0.0, 1.0, 1, 0.9)),
        ];
        let json = predictions_to_json(&preds).unwrap();
        let parsed: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed[0]["video_id"], "b");
        assert_eq!(parsed[1]["score"], 0.2);
        assert!(parsed[0].get("class_id").is_some());
    }
}
