//! Event-based egocentric hand tracking.
//!
//! Events are binned into fixed-time windows, turned into single-channel
//! LNES-Fast frames, cropped around the detected wrist and fed to a small
//! multi-task network. Evaluation uses root-aligned PCK curves.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod event_io;
pub mod geomstats;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod representation;
pub mod roi;
pub mod toy;

pub use error::{Error, Result};
