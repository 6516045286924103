//! Vessel segmentation for volumetric two-photon image stacks.
//!
//! The pipeline runs motion correction ([`motion`]), intensity
//! normalization ([`volume`]), patch-wise 3D CNN segmentation ([`net`],
//! [`segment`]), centerline extraction ([`centerline`]) and per-segment
//! morphometry with group statistics ([`morphometry`]). [`metrics`] scores
//! segmentations against ground truth and [`phantom`] generates synthetic
//! volumes with exact truth.

pub mod centerline;
pub mod error;
pub mod metrics;
pub mod morphology;
pub mod morphometry;
pub mod motion;
pub mod net;
pub mod phantom;
pub mod segment;
pub mod volume;

pub use error::{Error, Result};
