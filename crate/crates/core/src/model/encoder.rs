//! Frozen feature extractors standing in for pretrained backbones.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::{hash_f32, sha256, Fingerprint};
use crate::numerics::{gelu, Matrix, Rng};
use crate::shiftbench::UnlabeledBatch;
use crate::{Error, Result};

use super::mean_pool;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderKind {
    /// Flattened window is the feature vector; lets precomputed features
    /// from an external backbone flow straight into the head.
    Identity,
    /// `z = flatten(x) · P`, `P ~ N(0, 1/(C·T))`.
    RandomProjection { out_dim: usize, seed: u64 },
    /// Per-time-step `GELU(x_t · W1 + b1) · W2 + b2`, mean-pooled over time.
    TwoLayer { hidden: usize, out_dim: usize, seed: u64 },
}

impl EncoderKind {
    pub fn label(&self) -> String {
        match self {
            EncoderKind::Identity => "identity".into(),
            EncoderKind::RandomProjection { out_dim, seed } => format!("rp{out_dim}s{seed}"),
            EncoderKind::TwoLayer { hidden, out_dim, seed } => format!("mlp{hidden}x{out_dim}s{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub channels: usize,
    pub samples: usize,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, channels: usize, samples: usize) -> Self {
        Self {
            kind,
            channels,
            samples,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Identity => self.channels * self.samples,
            EncoderKind::RandomProjection { out_dim, .. } | EncoderKind::TwoLayer { out_dim, .. } => out_dim,
        }
    }

    /// Hash of a fixed little-endian encoding of the spec.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut bytes = Vec::with_capacity(48);
        let (tag, a, b, c) = match self.kind {
            EncoderKind::Identity => (0u8, 0, 0, 0),
            EncoderKind::RandomProjection { out_dim, seed } => (1, out_dim as u64, 0, seed),
            EncoderKind::TwoLayer { hidden, out_dim, seed } => (2, out_dim as u64, hidden as u64, seed),
        };
        bytes.push(tag);
        for v in [a, b, c, self.channels as u64, self.samples as u64] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    None,
    Projection(Matrix<f32>),
    TwoLayer {
        w1: Matrix<f32>,
        b1: Vec<f32>,
        w2: Matrix<f32>,
        b2: Vec<f32>,
    },
}

/// A constructed encoder. Parameters are private and never change after
/// [`Encoder::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    weights: Weights,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| (rng.normal() * std) as f32)
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.channels == 0 || spec.samples == 0 {
            return Err(Error::Config("encoder input shape must be non-empty".into()));
        }
        let weights = match spec.kind {
            EncoderKind::Identity => Weights::None,
            EncoderKind::RandomProjection { out_dim, seed } => {
                if out_dim == 0 {
                    return Err(Error::Config("projection out_dim must be positive".into()));
                }
                let fan_in = spec.channels * spec.samples;
                let mut rng = Rng::derive(seed, "encoder/projection", 0);
                Weights::Projection(gaussian(&mut rng, fan_in, out_dim, 1.0 / libm::sqrt(fan_in as f64)))
            }
            EncoderKind::TwoLayer { hidden, out_dim, seed } => {
                if hidden == 0 || out_dim == 0 {
                    return Err(Error::Config("two-layer encoder dims must be positive".into()));
                }
                let mut rng = Rng::derive(seed, "encoder/two_layer", 0);
                let w1 = gaussian(&mut rng, spec.channels, hidden, 1.0 / libm::sqrt(spec.channels as f64));
                let b1 = (0..hidden).map(|_| (rng.normal() * 0.1) as f32).collect();
                let w2 = gaussian(&mut rng, hidden, out_dim, 1.0 / libm::sqrt(hidden as f64));
                let b2 = (0..out_dim).map(|_| (rng.normal() * 0.1) as f32).collect();
                Weights::TwoLayer { w1, b1, w2, b2 }
            }
        };
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Hash over all parameter values; changes iff any weight changes.
    pub fn param_fingerprint(&self) -> Fingerprint {
        let mut all = Vec::new();
        match &self.weights {
            Weights::None => {}
            Weights::Projection(p) => all.extend_from_slice(p.as_slice()),
            Weights::TwoLayer { w1, b1, w2, b2 } => {
                all.extend_from_slice(w1.as_slice());
                all.extend_from_slice(b1);
                all.extend_from_slice(w2.as_slice());
                all.extend_from_slice(b2);
            }
        }
        let mut bytes = self.spec.fingerprint().to_vec();
        bytes.extend_from_slice(&hash_f32(&all));
        sha256(&bytes)
    }

    pub fn encode(&self, batch: &UnlabeledBatch) -> Result<FeatureBatch> {
        if (batch.channels, batch.samples) != (self.spec.channels, self.spec.samples) {
            return Err(Error::shape(
                "encode",
                format!("windows of {}x{}", self.spec.channels, self.spec.samples),
                format!("{}x{}", batch.channels, batch.samples),
            ));
        }
        let n = batch.len();
        let d = self.feature_dim();
        let z = match &self.weights {
            Weights::None => Matrix::from_vec(n, d, batch.data.clone())?,
            Weights::Projection(p) => Matrix::from_vec(n, p.rows(), batch.data.clone())?.matmul(p)?,
            Weights::TwoLayer { w1, b1, w2, b2 } => {
                let (c, t) = (self.spec.channels, self.spec.samples);
                let mut out = Matrix::zeros(n, d);
                for i in 0..n {
                    let window = batch.window(i);
                    // time steps as rows, channels as columns
                    let steps = Matrix::from_fn(t, c, |s, ch| window[ch * t + s]);
                    let mut h = steps.matmul(w1)?;
                    for s in 0..t {
                        for (v, &bias) in h.row_mut(s).iter_mut().zip(b1) {
                            *v = gelu(*v + bias);
                        }
                    }
                    let mut o = h.matmul(w2)?;
                    for s in 0..t {
                        for (v, &bias) in o.row_mut(s).iter_mut().zip(b2) {
                            *v += bias;
                        }
                    }
                    let seq: Vec<&[f32]> = (0..t).map(|s| o.row(s)).collect();
                    out.row_mut(i).copy_from_slice(&mean_pool(&seq)?);
                }
                out
            }
        };
        Ok(FeatureBatch {
            z,
            encoder: self.spec.fingerprint(),
            record_ids: batch.record_ids.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub z: Matrix<f32>,
    /// Fingerprint of the encoder spec that produced `z`.
    pub encoder: Fingerprint,
    pub record_ids: Vec<u64>,
}
