use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VideoRecord;
use crate::autodiff::{Mask, SeqTensor, Tensor3};
use crate::detection::{assign_targets, ActionSegment, AssignmentTargets, LossConfig, PyramidShape};
use crate::{Error, Result};

/// Right-padded videos with their masks and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the record slice the batch was built from.
    pub indices: Vec<usize>,
    pub video_ids: Vec<String>,
    pub features: SeqTensor,
    pub segments: Vec<Vec<ActionSegment>>,
}

impl Batch {
    pub fn lengths(&self) -> &[usize] {
        self.features.mask.lengths()
    }

    pub fn padded_len(&self) -> usize {
        self.features.time()
    }

    pub fn shape(&self, levels: usize) -> PyramidShape {
        PyramidShape::new(levels, self.padded_len(), self.lengths())
    }

    pub fn targets(&self, levels: usize, loss: &LossConfig, num_classes: usize) -> Result<AssignmentTargets> {
        assign_targets(&self.segments, &self.shape(levels), loss, num_classes)
    }
}

/// Smallest multiple of `multiple` that is at least `len`.
pub fn padded_length(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple.max(1)) * multiple.max(1)
}

/// Stacks `records[indices]` into one zero-padded batch.
pub fn collate(records: &[VideoRecord], indices: &[usize], pad_multiple: usize) -> Result<Batch> {
    let first = indices
        .first()
        .map(|&i| &records[i])
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let d = first.input_dim();
    let max_len = indices.iter().map(|&i| records[i].time()).max().unwrap_or(0);
    let t = padded_length(max_len, pad_multiple);
    let mut data = Tensor3::zeros([indices.len(), d, t]);
    let mut lengths = Vec::with_capacity(indices.len());
    for (b, &i) in indices.iter().enumerate() {
        let r = &records[i];
        if r.input_dim() != d {
            return Err(Error::Validation(format!(
                "video {} has feature dim {}, expected {d}",
                r.video_id,
                r.input_dim()
            )));
        }
        for c in 0..d {
            data.row_mut(b, c)[..r.time()].copy_from_slice(r.features.data.row(0, c));
        }
        lengths.push(r.time());
    }
    Ok(Batch {
        indices: indices.to_vec(),
        video_ids: indices.iter().map(|&i| records[i].video_id.clone()).collect(),
        features: SeqTensor::new(data, Mask::new(lengths, t)?)?,
        segments: indices.iter().map(|&i| records[i].segments.clone()).collect(),
    })
}

/// Splits `records` into batches of `batch_size` (the last may be smaller),
/// in a seeded random order when `shuffle_seed` is given.
pub fn make_batches(
    records: &[VideoRecord],
    batch_size: usize,
    pad_multiple: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(|idx| collate(records, idx, pad_multiple)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, t: usize) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            features: SeqTensor::dense(Tensor3::filled([1, 2, t], 1.0)),
            segments: vec![],
            duration: t as f64,
            feature_rate: 1.0,
        }
    }

    #[test]
    fn pads_to_multiple() {
        let recs = vec![record("a", 30), record("b", 17)];
        let batches = make_batches(&recs, 2, 32, None).unwrap();
        assert_eq!(batches[0].padded_len(), 32);
        assert_eq!(batches[0].lengths(), &[30, 17]);
        assert!(batches[0].features.data.row(1, 0)[17..].iter().all(|&v| v == 0.0));

        let single = make_batches(&recs, 1, 8, None).unwrap();
        assert_eq!(single[0].padded_len(), 32);
        assert_eq!(single[1].padded_len(), 24);
    }

    #[test]
    fn shuffle_is_seeded() {
        let recs: Vec<VideoRecord> = (0..10).map(|i| record(&format!("v{i}"), 8)).collect();
        let order = |seed| {
            make_batches(&recs, 3, 4, Some(seed))
                .unwrap()
                .into_iter()
                .flat_map(|b| b.indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(5), order(5));
        assert_ne!(order(5), order(6));
        let mut sorted = order(5);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_feature_dims_rejected() {
        let mut recs = vec![record("a", 8), record("b", 8)];
        recs[1].features = SeqTensor::dense(Tensor3::zeros([1, 3, 8]));
        assert!(make_batches(&recs, 2, 4, None).unwrap_err().is_data());
    }
}
