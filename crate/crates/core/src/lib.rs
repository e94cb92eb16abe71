//! Three-dimensional point tracking from two-dimensional linear-array
//! ultrasound images.
//!
//! A delay-and-sum image gives the in-plane position of a point target. A
//! small network maps that position plus an RF amplitude marker to the
//! out-of-plane offset magnitude and the axial aberration it causes, and a
//! Kalman filter fuses both over time.

pub mod beamformer;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod mlp;
pub mod simulator;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{ArrayGeometry, ImageGrid, Point3, RFFrame, USImage};
pub use kalman::{FilterState, ProcessNoise, Variant};
pub use mlp::{MLPParams, TrainedModel};
pub use tracker::{Session, TrackEstimate, TrackerConfig};
