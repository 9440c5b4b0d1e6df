//! Neutrino interaction classification from dual-view LArTPC pixel maps.
//!
//! The crate is organised as a pipeline:
//!
//! - [`eventgen`] draws toy neutrino interactions and renders them into
//!   pairs of 512×512 grayscale pixel maps (XZ and YZ views).
//! - [`datastore`] persists events in fixed-width binary shards, builds
//!   stratified splits and instruction-tuning prompt records.
//! - [`cnn`] is the Siamese MobileNetV2-style baseline classifier.
//! - [`vlm`] is the vision-language harness: a small stand-in backbone with
//!   low-rank adapters over (optionally 4-bit) frozen base weights.
//! - [`decode`] holds model-agnostic constrained generation and the
//!   temperature-scaled confidence extraction.
//! - [`evalkit`] computes metrics and renders the comparison report.
//!
//! Data-parallel inner loops (event generation, per-sample gradients, fuzz
//! sweeps) go through [`par`], which uses rayon when the `parallel` feature is
//! enabled and plain iterators otherwise.

pub mod ckpt;
pub mod class;
pub mod cnn;
pub mod config;
pub mod datastore;
pub mod decode;
pub mod evalkit;
pub mod eventgen;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod seed;
pub mod vlm;

pub use class::{InteractionClass, Prediction, NUM_CLASSES};
