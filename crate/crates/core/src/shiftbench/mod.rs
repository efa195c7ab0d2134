//! Data layer: dataset records and batches, per-channel normalization and
//! seeded synthetic distribution-shift suites.

mod data;
mod normalize;
mod suite;

pub use data::{
    batch_iter, check_subject_disjoint, BatchOrder, Dataset, DatasetManifest, RecordMeta, Split, Task, UnlabeledBatch,
    WindowBatch,
};
pub use normalize::{normalize_p95, percentile, P95_FLOOR};
pub use suite::{generate_suite, ShiftKind, SignalMode, SuiteData, SuiteSpec};
