//! Core of the neuroadapt test-time adaptation benchmark.
//!
//! Everything here is pure computation over explicit inputs: numeric kernels
//! with hand-derived gradients, the frozen-encoder plus shared-head model,
//! supervised head fine-tuning, the No-TTA / Tent / SHOT / T3A adapters,
//! classification metrics and seeded synthetic distribution-shift suites.
//! File formats, configuration and the CLI live in the `neuroadapt` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod finetune;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod shiftbench;
pub mod tta;

pub use error::{Error, Result};
