//! Benchmark harness around `neuroadapt-core`: NADB dataset files,
//! checkpoint files, JSON experiment plans, the grid runner, delta reports
//! and the built-in self-test.

pub mod ckpt;
pub mod error;
pub mod fsutil;
pub mod nadb;
pub mod plan;
pub mod report;
pub mod runner;
pub mod selftest;

pub use error::{HarnessError, Result};
pub use neuroadapt_core as core;
