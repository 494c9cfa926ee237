//! Datasets: synthetic generation, feature and annotation files, batching,
//! run configuration and the learning-rate schedule.

mod annotations;
mod batch;
mod config;
mod features;
mod synthetic;

pub use annotations::{
    annotations_to_json, load_annotations, parse_annotations, AnnotationFile, Annotations, RawSegment, RawVideo,
    VideoAnnotation,
};
pub use batch::{collate, make_batches, padded_length, Batch};
pub use config::{DataConfig, EvalConfig, OptimConfig, RunConfig};
pub use features::{
    load_features, parse_features, read_features, save_features, write_features, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{generate_synthetic, synthetic_labels, SyntheticSpec};

use std::path::Path;

use crate::autodiff::SeqTensor;
use crate::detection::{ActionSegment, VideoSegment};
use crate::{Error, Result};

/// One video: features `(1, D_in, T)` and ground truth in feature steps.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub features: SeqTensor,
    pub segments: Vec<ActionSegment>,
    /// Seconds.
    pub duration: f64,
    /// Feature steps per second.
    pub feature_rate: f64,
}

impl VideoRecord {
    pub fn time(&self) -> usize {
        self.features.time()
    }

    pub fn input_dim(&self) -> usize {
        self.features.channels()
    }

    pub fn ground_truth(&self) -> Vec<VideoSegment> {
        self.segments.iter().map(|&s| VideoSegment::new(self.video_id.clone(), s)).collect()
    }
}

/// Ground truth of all records, tagged by video.
pub fn ground_truth(records: &[VideoRecord]) -> Vec<VideoSegment> {
    records.iter().flat_map(VideoRecord::ground_truth).collect()
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const FEATURE_DIR: &str = "features";

/// A dataset directory: `annotations.json` plus `features/<id>.cdtf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub records: Vec<VideoRecord>,
}

pub fn save_dataset(dir: impl AsRef<Path>, labels: &[String], records: &[VideoRecord]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(FEATURE_DIR))?;
    let videos: Vec<VideoAnnotation> = records
        .iter()
        .map(|r| VideoAnnotation {
            id: r.video_id.clone(),
            duration: r.duration,
            feature_rate: r.feature_rate,
            segments: r.segments.clone(),
        })
        .collect();
    std::fs::write(dir.join(ANNOTATION_FILE), annotations_to_json(&videos, labels)?)?;
    for r in records {
        save_features(dir.join(FEATURE_DIR).join(format!("{}.cdtf", r.video_id)), &r.features.data)?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ann = load_annotations(dir.join(ANNOTATION_FILE))?;
    let mut records = Vec::with_capacity(ann.videos.len());
    for v in ann.videos {
        let features = load_features(dir.join(FEATURE_DIR).join(format!("{}.cdtf", v.id)))?;
        let steps = features.time() as f64;
        if let Some(s) = v.segments.iter().find(|s| s.end > steps + 1e-9) {
            return Err(Error::Validation(format!(
                "video {:?}: segment ends at step {} beyond the {} feature steps",
                v.id, s.end, steps
            )));
        }
        records.push(VideoRecord {
            video_id: v.id,
            features,
            segments: v.segments,
            duration: v.duration,
            feature_rate: v.feature_rate,
        });
    }
    Ok(Dataset {
        labels: ann.labels,
        records,
    })
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 10, 0.1), 0.0);
        assert_eq!(lr_schedule(1, 100, 10, 0.1), 0.1 / 10.0);
        assert_eq!(lr_schedule(10, 100, 10, 0.1), 0.1);
        assert!((lr_schedule(55, 100, 10, 0.1) - 0.05).abs() < 1e-12);
        assert!(lr_schedule(99, 100, 10, 0.1) < 1e-3);
        assert_eq!(lr_schedule(0, 10, 0, 0.1), 0.1);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec = SyntheticSpec {
            num_videos: 3,
            ..SyntheticSpec::default()
        };
        let recs = generate_synthetic(&spec).unwrap();
        let labels = synthetic_labels(3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &labels, &recs).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.records, recs);
    }
}
