//! Desk-scale, end-to-end panoptic part segmentation with unified
//! thing/stuff/part queries.
//!
//! The crate contains the full pipeline: a deterministic synthetic scene
//! generator, a convolutional encoder with a multi-scale neck, a decoupled
//! scene/part feature decoder, a cascaded query-reasoning decoder, bipartite
//! matching with a deep-supervised focal+dice loss, panoptic/part merging,
//! and PQ / PartPQ evaluation, plus the training and evaluation harness
//! behind the `pps` CLI.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod hungarian;
pub mod loss;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod reasoning;
pub mod render;
pub mod synth;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result};
