//! Physics-informed MR simulation and acquisition-invariance evaluation.
//!
//! The crate covers the whole non-network side of a physics-aware
//! segmentation pipeline:
//!
//! * [`volume`] and [`nifti`]: grid-aligned fields, NIfTI-1 I/O, patches.
//! * [`simulator`]: SPGR / MPRAGE static signal equations applied voxelwise
//!   to quantitative multi-parametric maps.
//! * [`gold_standard`]: acquisition-independent soft segmentation from a
//!   fixed Gaussian mixture over tissue parameters.
//! * [`augmentation`]: acquisition-parameter sampling and single-subject
//!   batches for feature-consistency training.
//! * [`uncertainty`]: reference loss values (noisy-logit cross-entropy,
//!   batch feature consistency), aleatoric sampling and volume bounds.
//! * [`phantom`]: a synthetic three-tissue fixture.
//! * [`metrics`]: Dice, coefficient of variation, Wilcoxon signed-rank and
//!   table/sweep reports.
//!
//! Voxel data is stored flat with x varying fastest, then y, then z;
//! multi-channel fields are stored channel after channel.

pub mod augmentation;
pub mod error;
pub mod gold_standard;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    GridField, LabelMap, MultiParametricMap, PatchSpec, SimulatedVolume, SoftSegmentation,
    TissueClass, VoxelGrid,
};
