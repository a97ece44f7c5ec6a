//! Group-aware pedestrian trajectory prediction.
//!
//! Pedestrians in a scene are assigned to behavior groups by a learned
//! embedding with a learnable distance threshold; the scene graph is then
//! disentangled into agent-wise, intra-group and inter-group interaction
//! graphs. A weight-shared encoder reads all three, a fusion head emits
//! per-pedestrian bivariate Gaussian displacement fields, and multi-modal
//! futures are sampled with scene-, pedestrian- or group-level noise.
//! Grouping is trained end to end through a straight-through estimator.
//!
//! The crate also ships the surrounding experiment kit: dataset parsing and
//! windowing, a synthetic crowd generator with ground-truth group labels,
//! gradient training, trajectory metrics (ADE/FDE/COL/TCC) and grouping
//! metrics (pairwise and Group-MITRE precision/recall), plus a CLI that
//! wires it all together.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod grouping;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod predictor;
pub mod synth;
pub mod training;
pub mod trajectories;

pub use error::{Error, Result};
