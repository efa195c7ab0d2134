//! Seeded synthetic source/target suites.
//!
//! Source and target share class-conditional Gaussians; the target side then
//! receives the configured shifts. Subjects are drawn from disjoint pools
//! (`s*` for source, `t*` for target) and each subject carries a mean offset
//! `~ N(0, subject_std² I)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{normalize_p95, Dataset, DatasetManifest, RecordMeta, Split, Task};
use crate::finetune::split_patients;
use crate::numerics::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    SubjectShift,
    LabelShift,
    CovariateShift,
    ModalityShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalMode {
    /// One sample per channel: each window is a D-dim feature vector.
    Features,
    /// Oscillatory multichannel windows with smoothed noise.
    Windows { samples: usize, sample_rate: f32 },
}

fn default_separation() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    1.0
}
fn default_source_subjects() -> usize {
    20
}
fn default_target_subjects() -> usize {
    10
}
fn default_one() -> f64 {
    1.0
}
fn default_mode() -> SignalMode {
    SignalMode::Features
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub kind: ShiftKind,
    pub num_classes: usize,
    pub channels: usize,
    #[serde(default = "default_mode")]
    pub mode: SignalMode,
    /// Distance between class means, in units of `noise_std`.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Empty means uniform.
    #[serde(default)]
    pub source_priors: Vec<f64>,
    /// Empty means "same as source".
    #[serde(default)]
    pub target_priors: Vec<f64>,
    #[serde(default)]
    pub subject_std: f64,
    #[serde(default = "default_source_subjects")]
    pub source_subjects: usize,
    #[serde(default = "default_target_subjects")]
    pub target_subjects: usize,
    /// Per-channel target gain; empty means 1.
    #[serde(default)]
    pub channel_gain: Vec<f64>,
    /// Per-channel target offset (in `noise_std` units); empty means 0.
    #[serde(default)]
    pub channel_offset: Vec<f64>,
    /// Channels zeroed in the target (modality shift).
    #[serde(default)]
    pub dropped_channels: Vec<usize>,
    /// Gain applied to the surviving target channels when any are dropped.
    #[serde(default = "default_one")]
    pub modality_gain: f64,
    #[serde(default)]
    pub normalize_p95: bool,
    pub n_source: usize,
    pub n_target: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SuiteSpec {
    /// Shift-free baseline: target exchangeable with source.
    pub fn null(num_classes: usize, channels: usize, n_source: usize, n_target: usize) -> Self {
        Self {
            kind: ShiftKind::SubjectShift,
            num_classes,
            channels,
            mode: SignalMode::Features,
            separation: default_separation(),
            noise_std: 1.0,
            source_priors: Vec::new(),
            target_priors: Vec::new(),
            subject_std: 0.0,
            source_subjects: default_source_subjects(),
            target_subjects: default_target_subjects(),
            channel_gain: Vec::new(),
            channel_offset: Vec::new(),
            dropped_channels: Vec::new(),
            modality_gain: 1.0,
            normalize_p95: false,
            n_source,
            n_target,
            seed: 0,
        }
    }

    pub fn source_priors(&self) -> Vec<f64> {
        if self.source_priors.is_empty() {
            vec![1.0 / self.num_classes as f64; self.num_classes]
        } else {
            self.source_priors.clone()
        }
    }

    pub fn target_priors(&self) -> Vec<f64> {
        if self.target_priors.is_empty() {
            self.source_priors()
        } else {
            self.target_priors.clone()
        }
    }

    pub fn window_shape(&self) -> (usize, usize) {
        match self.mode {
            SignalMode::Features => (self.channels, 1),
            SignalMode::Windows { samples, .. } => (self.channels, samples),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        let c = self.channels;
        if k < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {k}")));
        }
        if k > c {
            return Err(Error::Spec(format!("{k} classes need at least {k} channels, got {c}")));
        }
        for (name, p) in [
            ("source_priors", &self.source_priors),
            ("target_priors", &self.target_priors),
        ] {
            if p.is_empty() {
                continue;
            }
            if p.len() != k {
                return Err(Error::Spec(format!("{name} has {} entries for {k} classes", p.len())));
            }
            if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Spec(format!("{name} must be non-negative and finite")));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!("{name} sums to {total}, not 1")));
            }
        }
        for (name, v) in [
            ("channel_gain", &self.channel_gain),
            ("channel_offset", &self.channel_offset),
        ] {
            if !v.is_empty() && v.len() != c {
                return Err(Error::Spec(format!("{name} has {} entries for {c} channels", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Spec(format!("{name} must be finite")));
            }
        }
        if let Some(&bad) = self.dropped_channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::Spec(format!(
                "dropped channel {bad} out of range for {c} channels"
            )));
        }
        let finite = [self.separation, self.noise_std, self.subject_std, self.modality_gain];
        if finite.iter().any(|v| !v.is_finite()) || self.noise_std <= 0.0 || self.subject_std < 0.0 {
            return Err(Error::Spec(
                "separation/noise/subject std must be finite, noise > 0".into(),
            ));
        }
        if self.source_subjects < 2 || self.target_subjects < 1 {
            return Err(Error::Spec("need >= 2 source subjects and >= 1 target subject".into()));
        }
        if self.n_source < self.source_subjects || self.n_target == 0 {
            return Err(Error::Spec("every source subject needs at least one record".into()));
        }
        if let SignalMode::Windows { samples, sample_rate } = self.mode {
            if samples < 2 || sample_rate.is_nan() || sample_rate <= 0.0 {
                return Err(Error::Spec("window mode needs >= 2 samples and a positive rate".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteData {
    /// Train and val splits, subject-disjoint.
    pub source: Dataset,
    /// Test split from a disjoint subject pool.
    pub target: Dataset,
}

/// Orthonormal directions scaled so every pair of class means is
/// `separation · noise_std` apart, then centered.
fn class_means(spec: &SuiteSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (k, c) = (spec.num_classes, spec.channels);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = spec.separation * spec.noise_std / core::f64::consts::SQRT_2;
    let mut means: Vec<Vec<f64>> = basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect();
    let centroid: Vec<f64> = (0..c)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64)
        .collect();
    for m in &mut means {
        m.iter_mut().zip(&centroid).for_each(|(x, c)| *x -= c);
    }
    means
}

fn draw_label(priors: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (k, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

struct Side<'a> {
    prefix: &'a str,
    n: usize,
    subjects: usize,
    priors: Vec<f64>,
    tag: &'a str,
    shifted: bool,
}

pub fn generate_suite(spec: &SuiteSpec) -> Result<SuiteData> {
    spec.validate()?;
    let seed = spec.seed;
    let means = class_means(spec, &mut Rng::derive(seed, "suite/means", 0));
    let (channels, samples) = spec.window_shape();
    let sample_rate = match spec.mode {
        SignalMode::Features => 1.0,
        SignalMode::Windows { sample_rate, .. } => sample_rate,
    };
    let task = Task::for_classes(spec.num_classes);

    let build = |side: Side<'_>| -> Result<Dataset> {
        let offsets: Vec<Vec<f64>> = (0..side.subjects)
            .map(|s| {
                let mut r = Rng::derive(seed, side.tag, 1_000_000 + s as u64);
                (0..channels)
                    .map(|_| r.normal() * spec.subject_std * spec.noise_std)
                    .collect()
            })
            .collect();
        let mut rng = Rng::derive(seed, side.tag, 0);
        let mut records = Vec::with_capacity(side.n);
        let mut data = Vec::with_capacity(side.n * channels * samples);
        let mut window = vec![0.0f64; channels * samples];
        for i in 0..side.n {
            let subject = i % side.subjects;
            let y = draw_label(&side.priors, &mut rng);
            synth_window(spec, &means[y], y, &offsets[subject], &mut rng, &mut window);
            if side.shifted {
                apply_target_shift(spec, samples, &mut window);
            }
            let mut w32: Vec<f32> = window.iter().map(|&v| v as f32).collect();
            if spec.normalize_p95 {
                normalize_p95(&mut w32, channels, samples);
            }
            data.extend_from_slice(&w32);
            records.push(RecordMeta {
                id: i as u64,
                subject_id: format!("{}{subject}", side.prefix),
                channels,
                samples,
                sample_rate,
                label: Some(y),
                split: Split::Test,
            });
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                task,
                channels,
                samples,
                data_file: String::new(),
                records,
            },
            data,
        })
    };

    let mut source = build(Side {
        prefix: "s",
        n: spec.n_source,
        subjects: spec.source_subjects,
        priors: spec.source_priors(),
        tag: "suite/source",
        shifted: false,
    })?;
    let subjects: Vec<String> = source.manifest.records.iter().map(|r| r.subject_id.clone()).collect();
    let (train, _) = split_patients(&subjects, seed, 0.8)?;
    for r in &mut source.manifest.records {
        r.split = if train.contains(&r.subject_id) {
            Split::Train
        } else {
            Split::Val
        };
    }
    source.manifest.data_file = "source.nadb".into();

    let mut target = build(Side {
        prefix: "t",
        n: spec.n_target,
        subjects: spec.target_subjects,
        priors: spec.target_priors(),
        tag: "suite/target",
        shifted: true,
    })?;
    target.manifest.data_file = "target.nadb".into();
    source.manifest.validate()?;
    target.manifest.validate()?;
    Ok(SuiteData { source, target })
}

fn synth_window(spec: &SuiteSpec, mean: &[f64], label: usize, offset: &[f64], rng: &mut Rng, out: &mut [f64]) {
    match spec.mode {
        SignalMode::Features => {
            for (j, v) in out.iter_mut().enumerate() {
                *v = mean[j] + offset[j] + rng.normal() * spec.noise_std;
            }
        }
        SignalMode::Windows { samples, sample_rate } => {
            let freq = 2.0 + 3.0 * label as f64;
            let phase = rng.uniform() * core::f64::consts::TAU;
            for (ch, row) in out.chunks_exact_mut(samples).enumerate() {
                let amplitude = 1.0 + mean[ch];
                let mut prev = rng.normal();
                for (t, v) in row.iter_mut().enumerate() {
                    let arg = core::f64::consts::TAU * freq * t as f64 / f64::from(sample_rate) + phase;
                    let white = rng.normal();
                    // two-tap average keeps the noise band-limited
                    let noise = 0.5 * (white + prev) * spec.noise_std;
                    prev = white;
                    *v = amplitude * libm::sin(arg) + offset[ch] + noise;
                }
            }
        }
    }
}

fn apply_target_shift(spec: &SuiteSpec, samples: usize, window: &mut [f64]) {
    for (ch, row) in window.chunks_exact_mut(samples).enumerate() {
        let gain = spec.channel_gain.get(ch).copied().unwrap_or(1.0);
        let offset = spec.channel_offset.get(ch).copied().unwrap_or(0.0) * spec.noise_std;
        let dropped = spec.dropped_channels.contains(&ch);
        let modality = if spec.dropped_channels.is_empty() {
            1.0
        } else {
            spec.modality_gain
        };
        for v in row.iter_mut() {
            *v = if dropped { 0.0 } else { (gain * *v + offset) * modality };
        }
    }
}
