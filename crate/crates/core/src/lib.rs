//! Structured-light depth decoding at desk scale.
//!
//! The crate covers the whole pipeline: projected pattern synthesis, a ray-cast
//! projector/camera simulator with exact ground truth, classical pixel-domain
//! decoders, a cost-volume + recurrent neural matcher, a prompt-guided depth
//! refiner, evaluation metrics, and the on-disk dataset format.

pub mod autograd;
pub mod checkpoint;
pub mod classical;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patterns;
pub mod raster;
pub mod refine;
pub mod rng;
pub mod simulator;

pub use error::{NslError, Result};
pub use geometry::{DepthMap, DisparityMap, Intrinsics, RigCalibration};
pub use patterns::{generate_pattern, PatternImage, PatternKind, PatternSpec};
pub use raster::{Image, Raster, ValidityMask};
