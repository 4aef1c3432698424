//! Class-incremental learning benchmark with decoupled batch-norm
//! statistics control.
//!
//! The crate trains small BN-equipped MLPs over streams of tasks with
//! disjoint class sets and compares rehearsal strategies that differ only in
//! how training batches are composed and which batches drive the BN running
//! statistics. It ships:
//!
//! - a minimal reverse-mode autodiff engine ([`autodiff`]),
//! - batch normalization with explicit statistics/EMA control
//!   ([`normalization`]),
//! - replay buffers with reservoir and herding policies ([`replay`]),
//! - synthetic class-incremental task streams ([`scenario`]),
//! - the training strategies ER, DER++, iCaRL and their batch-composition
//!   variants ([`strategies`]),
//! - accuracy/forgetting metrics and diagnostic probes ([`evaluation`]),
//! - a seeded multi-run experiment harness behind the `clbench` CLI
//!   ([`harness`]).

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod normalization;
pub mod replay;
pub mod scenario;
pub mod strategies;

pub use error::{Error, Result};
