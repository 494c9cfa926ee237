//! Temporal action detection with an adaptive context aggregation pyramid.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] is a small reverse-mode engine over `(batch, channels, time)`
//!   tensors with validity masks.
//! * [`model`] builds the projection layer and the multi-level pyramid whose
//!   levels mix a gated context attention branch with large/small kernel
//!   depthwise convolutions.
//! * [`detection`] holds the classification/regression heads, label
//!   assignment, the training loss and anchor-free segment decoding.
//! * [`eval`] provides tIoU, SoftNMS and mAP evaluation.
//! * [`data`] covers synthetic data, file formats, batching and run config.
//! * [`train`], [`gradcheck`] and [`plot`] tie the pieces together for the CLI.

pub mod autodiff;
pub mod data;
pub mod detection;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
