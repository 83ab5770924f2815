//! Panoramic multi-modal semantic segmentation on equirectangular images.
//!
//! The crate is organized bottom-up: [`geometry`] handles the spherical
//! image domain (rays, normals, HHA, resizing, on-disk formats), [`model`]
//! assembles the four-stage fusion encoder and the token-mixer decoder over
//! the autodiff tape from `panofuse-tensor`, [`train`] owns the optimizer
//! and the training loop, [`metrics`] the confusion-matrix evaluation, and
//! [`data`] the synthetic scene generator, manifests, and cost accounting.
//!
//! Everything is deterministic for a fixed seed at any worker count.

mod error;

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod geometry;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use error::CoreError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
