//! Disentangled representation transfer toolkit.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`synthgen`] renders the Texture-dSprites source dataset and samples
//!   weak-supervision pairs.
//! * [`tensorio`] is the on-disk data model (`DTNS` tensors, CSV manifests,
//!   image preprocessing, stratified splits).
//! * [`nn`] and [`vae`] implement the representation learner: MLP Gaussian
//!   VAEs trained with the beta-VAE or Ada-GVAE objectives.
//! * [`trees`] provides gradient boosted trees with Gini importance.
//! * [`metrics`] scores disentanglement (MIG, DCI, OMES*, explicitness).
//! * [`downstream`] runs the classification protocol over a model ensemble.
//! * [`analysis`] holds the interpretability diagnostics.
//! * [`config`] is the pipeline configuration shared by the CLI and reports.

pub mod analysis;
pub mod config;
pub mod downstream;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod stats;
pub mod synthgen;
pub mod tensorio;
pub mod trees;
pub mod vae;

pub use error::{Error, Result};
