//! Iterative mask refinement for unsupervised anomaly segmentation in brain MRI.
//!
//! A reconstruction network fills in masked regions of a healthy-looking
//! image, guided by a high-pass structural image. Regions it cannot explain
//! well stay masked, and the mask shrinks until it settles on the anomaly.

pub mod calibration;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod frequency;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod plane;
pub mod reconstruction;
pub mod refinement;
pub mod scalar;
pub mod seed;
pub mod spatial_masking;

pub use error::{Error, ErrorCategory, Result};
pub use mask::SpatialMask;
pub use plane::Plane;
pub use scalar::Scalar;

pub type Plane32 = plane::Plane<f32>;
pub type Plane64 = plane::Plane<f64>;
pub type Slice32 = data_io::Slice<f32>;
pub type Slice64 = data_io::Slice<f64>;
pub type Model32 = reconstruction::ReconstructionModel<f32>;
pub type Model64 = reconstruction::ReconstructionModel<f64>;
pub type RefinementRun32 = refinement::RefinementRun<f32>;
pub type RefinementRun64 = refinement::RefinementRun<f64>;
