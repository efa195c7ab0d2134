use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass(usize),
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass(k) => k,
        }
    }

    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            Task::Binary
        } else {
            Task::Multiclass(k)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub id: u64,
    pub subject_id: String,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: f32,
    #[serde(default)]
    pub label: Option<usize>,
    pub split: Split,
}

/// Record index for a dataset file. Record `i` occupies the `i`-th
/// `channels × samples` block of the data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub channels: usize,
    pub samples: usize,
    pub data_file: String,
    pub records: Vec<RecordMeta>,
}

impl DatasetManifest {
    pub fn window_len(&self) -> usize {
        self.channels * self.samples
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.samples == 0 {
            return Err(Error::Data("manifest declares an empty window shape".into()));
        }
        let k = self.task.num_classes();
        if k < 2 {
            return Err(Error::Data(format!("task needs at least 2 classes, got {k}")));
        }
        for r in &self.records {
            if r.channels != self.channels || r.samples != self.samples {
                return Err(Error::Data(format!(
                    "record {} has shape {}x{}, dataset is {}x{}",
                    r.id, r.channels, r.samples, self.channels, self.samples
                )));
            }
            if let Some(y) = r.label {
                if y >= k {
                    return Err(Error::Data(format!("record {} label {y} outside [0, {k})", r.id)));
                }
            }
        }
        check_subject_disjoint(&self.records)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Every subject must appear in exactly one split.
pub fn check_subject_disjoint(records: &[RecordMeta]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for r in records {
        match seen.get(r.subject_id.as_str()) {
            Some(&s) if s != r.split => {
                return Err(Error::Data(format!(
                    "subject {} appears in both {s:?} and {:?}",
                    r.subject_id, r.split
                )))
            }
            Some(_) => {}
            None => {
                seen.insert(r.subject_id.as_str(), r.split);
            }
        }
    }
    Ok(())
}

/// Manifest plus the contiguous window data it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub data: Vec<f32>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, data: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.records.len() * manifest.window_len();
        if data.len() != expected {
            return Err(Error::Data(format!(
                "manifest describes {} records ({expected} values) but data holds {} values",
                manifest.records.len(),
                data.len()
            )));
        }
        Ok(Self { manifest, data })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let n = self.manifest.window_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Batch of the given records; labels are attached only when every
    /// selected record carries one.
    pub fn batch(&self, indices: &[usize]) -> WindowBatch {
        let n = self.manifest.window_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut record_ids = Vec::with_capacity(indices.len());
        let mut subject_ids = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut all_labeled = true;
        for &i in indices {
            data.extend_from_slice(self.window(i));
            let r = &self.manifest.records[i];
            record_ids.push(r.id);
            subject_ids.push(r.subject_id.clone());
            match r.label {
                Some(y) => labels.push(y),
                None => all_labeled = false,
            }
        }
        WindowBatch {
            windows: UnlabeledBatch {
                channels: self.manifest.channels,
                samples: self.manifest.samples,
                data,
                record_ids,
            },
            labels: all_labeled.then_some(labels),
            subject_ids,
        }
    }

    /// Copy of the records in one split, preserving order.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx = self.manifest.indices(split);
        let n = self.manifest.window_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut records = Vec::with_capacity(idx.len());
        for &i in &idx {
            data.extend_from_slice(self.window(i));
            records.push(self.manifest.records[i].clone());
        }
        Dataset {
            manifest: DatasetManifest {
                records,
                ..self.manifest.clone()
            },
            data,
        }
    }
}

/// Windows with no label field at all; the only batch type adaptation code
/// accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub channels: usize,
    pub samples: usize,
    /// `len × channels × samples`, channel-major within a window.
    pub data: Vec<f32>,
    pub record_ids: Vec<u64>,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let n = self.channels * self.samples;
        &self.data[i * n..(i + 1) * n]
    }

    /// Concatenate batches with a common window shape.
    pub fn concat(parts: &[UnlabeledBatch]) -> Result<UnlabeledBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("no batches to concatenate".into()))?;
        let mut out = UnlabeledBatch {
            channels: first.channels,
            samples: first.samples,
            data: Vec::new(),
            record_ids: Vec::new(),
        };
        for p in parts {
            if (p.channels, p.samples) != (out.channels, out.samples) {
                return Err(Error::shape(
                    "UnlabeledBatch::concat",
                    format!("{}x{}", out.channels, out.samples),
                    format!("{}x{}", p.channels, p.samples),
                ));
            }
            out.data.extend_from_slice(&p.data);
            out.record_ids.extend_from_slice(&p.record_ids);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: UnlabeledBatch,
    pub labels: Option<Vec<usize>>,
    pub subject_ids: Vec<String>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn strip_labels(self) -> UnlabeledBatch {
        self.windows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    Sequential,
    Shuffled { seed: u64, epoch: u64 },
}

/// Batches over one split. The final partial batch is emitted.
pub fn batch_iter(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    order: BatchOrder,
) -> Result<impl Iterator<Item = WindowBatch> + '_> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut idx = dataset.manifest.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no records")));
    }
    if let BatchOrder::Shuffled { seed, epoch } = order {
        crate::numerics::Rng::derive(seed, "shuffle", epoch).shuffle(&mut idx);
    }
    let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |c| dataset.batch(&c)))
}
