//! Desk-scale modeling of 4D scalar-field sequences (time x 3D space).
//!
//! The crate is organized in dependency order:
//!
//! * [`tensor`] — a minimal dense-tensor engine with tape-based reverse-mode
//!   differentiation, a finite-difference oracle, and an Adam optimizer.
//! * [`volume`] — a NIfTI-1 subset reader/writer, synthetic 4D data, and the
//!   geometric/statistical preprocessing pipeline.
//! * [`backbone`] — the shifted-window encoder: patch embedding, 4D window
//!   layouts, selective state-space scans, windowed attention, patch merging.
//! * [`pretrain`] — masked-autoencoder pretraining with spatiotemporal
//!   redundancy dropout on attention.
//! * [`prompt`] — prompt tuning against a frozen backbone.
//! * [`harness`] — splits, label codecs, metrics, retrieval protocol, and the
//!   benchmark driver.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
