//! Self-supervised failure detection and faulty-sensor localization for
//! smart-home sensor networks.
//!
//! The pipeline has an offline and a run-time half:
//!
//! * [`sensor`] and [`synth`] describe the sensor inventory and produce event
//!   traces (parsed from CASAS-style logs or simulated).
//! * [`faults`] injects the six fault models into traces and samples
//!   injection plans.
//! * [`encoding`] turns events into bit-level, early-fused interval vectors and
//!   five-interval sequence windows.
//! * [`model`] is a small BERT-style encoder trained by sensor-wise masked
//!   reconstruction with focal loss and Adam, with hand-written backprop.
//! * [`runtime`] streams windows through the encoder, converts reconstruction
//!   residuals into EWMA-smoothed per-sensor evidence and isolates tripped
//!   sensors so further failures can surface.
//! * [`eval`] implements the segment-duplication evaluation protocol, the
//!   detection/localization metrics and the command line front end.

pub mod encoding;
pub mod error;
pub mod eval;
pub mod faults;
pub mod model;
pub mod runtime;
pub mod sensor;
pub mod synth;

pub use error::{Error, Result};

/// Length of one interval of the feature grid, in seconds.
pub const INTERVAL_SECS: f64 = 60.0;

/// Number of consecutive intervals in a sequence window.
pub const WINDOW_LEN: usize = 5;
