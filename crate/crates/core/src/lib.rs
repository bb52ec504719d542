//! Human behavior understanding for assembly-line workstations.
//!
//! Ingests time-synchronized pose, mask and depth data, classifies
//! ergonomic work postures by soft-DTW alignment, estimates car-door pose,
//! monitors assembly progress with a small transformer encoder, and
//! evaluates everything with standard pose and classification metrics.

pub mod annotations;
pub mod bvh;
pub mod door;
pub mod eaws;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pose_stream;
pub mod progress;
pub mod softdtw;
pub mod synth;

pub use error::{Error, Result};
