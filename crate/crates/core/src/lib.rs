//! Object-dissimilarity saliency.
//!
//! Builds per-object appearance and size dissimilarity channels from
//! detections, fuses them with global feature tensors, trains a per-pixel
//! readout on the fused features, and evaluates predicted saliency maps with
//! the usual fixation metrics (AUC-Judd, shuffled AUC, NSS, KLD, CC, SIM).
//!
//! Module map:
//!
//! * [`tensor`]: feature tensors, rank-2 maps, resize, slicing, blur, softmax.
//! * [`dissimilarity`]: appearance and size channels and feature fusion.
//! * [`readout`]: the trainable decoder, its losses, gradients and optimizer.
//! * [`metrics`]: evaluation metrics and batch reports.
//! * [`svcca`]: SVD + CCA feature distance, usable as an alternative object
//!   similarity.
//! * [`harness`]: on-disk formats, synthetic corpora, experiment protocols and
//!   the command line front end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dissimilarity;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod readout;
pub mod svcca;
pub mod tensor;

pub use error::{Error, Result};
