use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::VideoRecord;
use crate::autodiff::{SeqTensor, Tensor3};
use crate::detection::ActionSegment;
use crate::{Error, Result};

/// Recipe for a toy detection dataset: every class owns a random feature
/// signature, frames inside a segment carry it plus noise and background
/// frames carry noise only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub min_time: usize,
    pub max_time: usize,
    pub input_dim: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 32,
            num_classes: 3,
            min_time: 64,
            max_time: 128,
            input_dim: 16,
            min_segments: 1,
            max_segments: 3,
            min_segment_len: 8,
            max_segment_len: 32,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.num_classes == 0 || self.input_dim == 0 {
            return bad("num_classes and input_dim must be positive");
        }
        if self.min_time == 0 || self.min_time > self.max_time {
            return bad("need 0 < min_time <= max_time");
        }
        if self.min_segments > self.max_segments {
            return bad("min_segments exceeds max_segments");
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("need 0 < min_segment_len <= max_segment_len");
        }
        if self.min_segments * self.min_segment_len > self.min_time {
            return bad("min_segments segments of min_segment_len cannot fit in min_time steps");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite nonnegative number");
        }
        Ok(())
    }

    /// One signature per class, `signatures[c][d]`.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_classes)
            .map(|_| (0..self.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }
}

/// Generates `spec.num_videos` videos, deterministic in `spec.seed`.
///
/// Segments never overlap and start and end on integer steps. Features are
/// rounded to f32 so that a write/read round trip is exact.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<VideoRecord>> {
    spec.validate()?;
    let signatures = spec.signatures();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut out = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let t = rng.random_range(spec.min_time..=spec.max_time);
        let wanted = rng.random_range(spec.min_segments..=spec.max_segments);
        let k = wanted.min(t / spec.min_segment_len);
        let mut lengths = Vec::with_capacity(k);
        let mut used = 0;
        for i in 0..k {
            let reserve = (k - i - 1) * spec.min_segment_len;
            let hi = spec.max_segment_len.min(t - used - reserve);
            let len = rng.random_range(spec.min_segment_len..=hi);
            lengths.push(len);
            used += len;
        }
        let slack = t - used;
        let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();

        let mut frame_class = vec![None; t];
        let mut segments = Vec::with_capacity(k);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (len, cut) in lengths.into_iter().zip(cuts) {
            cursor += cut - prev_cut;
            prev_cut = cut;
            let class = rng.random_range(0..spec.num_classes);
            frame_class[cursor..cursor + len].fill(Some(class));
            segments.push(ActionSegment::ground_truth(cursor as f64, (cursor + len) as f64, class));
            cursor += len;
        }

        let mut features = Tensor3::zeros([1, spec.input_dim, t]);
        for (ti, class) in frame_class.iter().enumerate() {
            for d in 0..spec.input_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let base = class.map_or(0.0, |c| signatures[c][d]);
                features.set(0, d, ti, (base + spec.noise * noise) as f32 as f64);
            }
        }
        out.push(VideoRecord {
            video_id: format!("video_{v:04}"),
            features: SeqTensor::dense(features),
            segments,
            duration: t as f64,
            feature_rate: 1.0,
        });
    }
    Ok(out)
}

/// Class names used for synthetic data; they sort in id order.
pub fn synthetic_labels(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class_{c:03}")).collect()
}
