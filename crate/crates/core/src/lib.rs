//! Online test-time adaptation for streaming biosignal regression.
//!
//! A dual-head network is pretrained on labeled source-domain segments, then
//! adapted per subject on a target stream of unlabeled segments with sporadic
//! calibration labels. Adaptation draws batches from a dual-queue buffer and
//! mixes self-supervised reconstruction with supervised regression updates.

pub mod buffer;
pub mod engine;
pub mod error;
pub mod eval;
pub mod net;
pub mod seed;
pub mod signal;

pub use error::{OttaError, Result};
