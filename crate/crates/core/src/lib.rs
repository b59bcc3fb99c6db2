//! Desk-scale sparse-view myocardial perfusion SPECT toolkit.
//!
//! End to end: synthetic left-ventricle phantoms with parametric perfusion
//! defects, parallel-beam projection with Poisson counting noise for
//! full-view and sparse-view protocols, OSEM reconstruction, a 3D
//! convolutional restoration network trained with a hybrid fidelity +
//! anthropomorphic-channel loss, and detection-task evaluation with a
//! channelized Hotelling observer, AUC, and paired DeLong statistics.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the
//! pipeline, the persisted formats, and the default type parameters are
//! `f64`.

pub mod channels;
pub mod harness;
pub mod observer;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod restorer;
pub mod rng;
pub mod scalar;
pub mod voxel;

pub use scalar::Scalar;
pub use voxel::{Slice2D, Volume3D};
