//! Classification/regression heads, label assignment, training loss and
//! anchor-free decoding.

mod assign;
mod decode;
mod head;
mod loss;
mod segment;

pub use assign::{assign_targets, default_ranges, AssignmentTargets, LevelTargets, LossConfig, PyramidShape};
pub use decode::{decode, decode_video, DecodeConfig};
pub use head::{head_forward, head_param_specs, HeadOutputs, HeadValues};
pub use loss::{focal_loss, iou_loss, total_loss, total_loss_weighted, QualityWeights};
pub use segment::{predictions_to_json, random_segments, ActionSegment, VideoSegment};
