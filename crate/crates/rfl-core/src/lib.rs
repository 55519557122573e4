//! rfl-core: a desk-scale laboratory for studying how normalization layers
//! shift image classifiers between robust and non-robust features.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: f64 tensors and a reverse-mode tape with second-order support
//! * [`data`]: datasets, the synthetic robust/non-robust testbed, file loaders
//! * [`nn`]: layers, normalization variants, architectures, optimizers, training
//! * [`attacks`]: gradient attacks under l2/linf budgets
//! * [`metrics`]: input-gradient similarity, accuracy, corruption suite
//! * [`features`]: dataset distillation and feature-relabeling experiments
//! * [`harness`]: multi-seed experiment drivers and their CSV reports

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
