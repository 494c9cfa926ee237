//! Annotation files:
//! `{"videos":[{"id","duration","feature_rate","segments":[{"start","end","label"}]}]}`.
//!
//! Times in the file are seconds; they are converted to feature steps with
//! the video's `feature_rate` (steps per second). Labels map to class ids
//! through the sorted set of all labels in the file.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::ActionSegment;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSegment {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVideo {
    pub id: String,
    pub duration: f64,
    pub feature_rate: f64,
    #[serde(default)]
    pub segments: Vec<RawSegment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub videos: Vec<RawVideo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub id: String,
    /// Seconds.
    pub duration: f64,
    pub feature_rate: f64,
    /// In feature steps.
    pub segments: Vec<ActionSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    /// Sorted label vocabulary; a label's index is its class id.
    pub labels: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl Annotations {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

pub fn parse_annotations(text: &str) -> Result<Annotations> {
    let file: AnnotationFile =
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("annotation file: {e}")))?;
    from_raw(file)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn from_raw(file: AnnotationFile) -> Result<Annotations> {
    let labels: Vec<String> = file
        .videos
        .iter()
        .flat_map(|v| v.segments.iter().map(|s| s.label.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut seen = BTreeSet::new();
    let mut videos = Vec::with_capacity(file.videos.len());
    for v in file.videos {
        if !seen.insert(v.id.clone()) {
            return Err(Error::Validation(format!("duplicate video id {:?}", v.id)));
        }
        if !(v.feature_rate > 0.0 && v.feature_rate.is_finite()) || !(v.duration > 0.0 && v.duration.is_finite()) {
            return Err(Error::Validation(format!(
                "video {:?}: duration and feature_rate must be positive",
                v.id
            )));
        }
        let mut segments = Vec::with_capacity(v.segments.len());
        for (i, s) in v.segments.iter().enumerate() {
            if !(s.start < s.end) || s.start < 0.0 || s.end > v.duration {
                return Err(Error::Validation(format!(
                    "video {:?} segment {i} ({}): [{}, {}] must satisfy 0 <= start < end <= duration {}",
                    v.id, s.label, s.start, s.end, v.duration
                )));
            }
            let class_id = labels.binary_search(&s.label).expect("label is in the vocabulary");
            segments.push(ActionSegment::ground_truth(
                s.start * v.feature_rate,
                s.end * v.feature_rate,
                class_id,
            ));
        }
        videos.push(VideoAnnotation {
            id: v.id,
            duration: v.duration,
            feature_rate: v.feature_rate,
            segments,
        });
    }
    Ok(Annotations { labels, videos })
}

/// Inverse of [`parse_annotations`]; `labels[class_id]` names each class.
pub fn annotations_to_json(videos: &[VideoAnnotation], labels: &[String]) -> Result<String> {
    let raw = AnnotationFile {
        videos: videos
            .iter()
            .map(|v| RawVideo {
                id: v.id.clone(),
                duration: v.duration,
                feature_rate: v.feature_rate,
                segments: v
                    .segments
                    .iter()
                    .map(|s| RawSegment {
                        start: s.start / v.feature_rate,
                        end: s.end / v.feature_rate,
                        label: labels[s.class_id].clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_sorted_alphabetically() {
        let text = r#"{"videos":[
            {"id":"a","duration":10,"feature_rate":2,"segments":[{"start":1,"end":2,"label":"run"}]},
            {"id":"b","duration":10,"feature_rate":1,"segments":[{"start":0,"end":3,"label":"jump"}]},
            {"id":"c","duration":5,"feature_rate":1}
        ]}"#;
        let ann = parse_annotations(text).unwrap();
        assert_eq!(ann.labels, vec!["jump", "run"]);
        assert_eq!(ann.videos[0].segments, vec![ActionSegment::ground_truth(2.0, 4.0, 1)]);
        assert_eq!(ann.videos[1].segments[0].class_id, 0);
        assert!(ann.videos[2].segments.is_empty());
    }

    #[test]
    fn inverted_segment_names_the_record() {
        let text = r#"{"videos":[{"id":"clip7","duration":10,"feature_rate":1,
            "segments":[{"start":1,"end":2,"label":"x"},{"start":5,"end":5,"label":"y"}]}]}"#;
        let err = parse_annotations(text).unwrap_err();
        assert!(err.is_data());
        let msg = err.to_string();
        assert!(msg.contains("clip7") && msg.contains("segment 1"), "{msg}");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(parse_annotations(r#"{"videos":[],"extra":1}"#).is_err());
        assert!(parse_annotations("not json").is_err());
    }

    #[test]
    fn json_round_trip() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let videos = vec![VideoAnnotation {
            id: "v".into(),
            duration: 20.0,
            feature_rate: 4.0,
            segments: vec![ActionSegment::ground_truth(0.0, 4.0, 0), ActionSegment::ground_truth(8.0, 12.0, 1)],
        }];
        let back = parse_annotations(&annotations_to_json(&videos, &labels).unwrap()).unwrap();
        assert_eq!(back.videos, videos);
    }
}
