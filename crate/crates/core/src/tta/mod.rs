//! Stage 2: label-free adaptation behind one contract. No-TTA, Tent and T3A
//! consume the target stream batch by batch with state carried forward; SHOT
//! takes a full pass over the target set first.

mod shot;
mod t3a;
mod tent;

pub use shot::{shot_loss, shot_pseudo_labels, ShotConfig, ShotLossTerms, ShotState};
pub use t3a::{SupportEntry, T3aConfig, T3aState};
pub use tent::{TentConfig, TentState};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{head_forward, Checkpoint, Encoder, HeadParams, Mode};
use crate::numerics::{row_entropies, softmax, Matrix};
use crate::shiftbench::UnlabeledBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoTta,
    Tent,
    Shot,
    T3a,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoTta, Method::Tent, Method::Shot, Method::T3a];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoTta => "no_tta",
            Method::Tent => "tent",
            Method::Shot => "shot",
            Method::T3a => "t3a",
        }
    }

    pub fn regime(self) -> Regime {
        match self {
            Method::Shot => Regime::Offline,
            _ => Regime::Online,
        }
    }

    pub fn updates_parameters(self) -> bool {
        matches!(self, Method::Tent | Method::Shot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Online,
    Offline,
}

/// One adaptation method with its hyperparameters. Only the block matching
/// `method` is read; the others keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub method: Method,
    /// Distinguishes variants of one method in run records (e.g. a SHOT
    /// ablation). Defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub tent: TentConfig,
    #[serde(default)]
    pub shot: ShotConfig,
    #[serde(default)]
    pub t3a: T3aConfig,
    #[serde(default)]
    pub episodic: bool,
}

impl AdapterConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            label: None,
            tent: TentConfig::default(),
            shot: ShotConfig::default(),
            t3a: T3aConfig::default(),
            episodic: false,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().into())
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodic {
            return Err(Error::Config(
                "episodic=true is not supported; state always accumulates".into(),
            ));
        }
        if matches!(self.label.as_deref(), Some("")) {
            return Err(Error::Config("method label must not be empty".into()));
        }
        match self.method {
            Method::NoTta => Ok(()),
            Method::Tent => {
                if [self.tent.lr, self.tent.momentum]
                    .iter()
                    .any(|v| v.is_nan() || *v < 0.0)
                {
                    return Err(Error::Config("tent lr and momentum must be non-negative".into()));
                }
                Ok(())
            }
            Method::Shot => self.shot.validate(),
            Method::T3a => {
                if self.t3a.filter_k == 0 {
                    return Err(Error::Config("filter_k must be >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum AdapterState {
    NoTta(HeadParams<f32>),
    Tent(TentState),
    Shot(ShotState),
    T3a(T3aState),
}

impl AdapterState {
    /// The parameters predictions are made with (T3A swaps the classifier
    /// for prototypes but never touches these).
    pub fn head(&self) -> &HeadParams<f32> {
        match self {
            AdapterState::NoTta(h) => h,
            AdapterState::Tent(s) => s.head(),
            AdapterState::Shot(s) => s.head(),
            AdapterState::T3a(s) => s.head(),
        }
    }

    /// Predict and, for online methods, update on one batch of features.
    pub fn process(&mut self, z: &Matrix<f32>, batch: usize) -> Result<(Matrix<f32>, BatchDiagnostics)> {
        match self {
            AdapterState::NoTta(h) | AdapterState::Shot(ShotState { head: h, .. }) => {
                let (logits, _) = head_forward(h, z, Mode::Eval)?;
                let probs = softmax(&logits)?;
                let d = BatchDiagnostics::from_probs(batch, &probs);
                Ok((probs, d))
            }
            AdapterState::Tent(s) => s.step(z, batch),
            AdapterState::T3a(s) => s.update_and_predict(z, batch),
        }
    }
}

pub fn adapter_init(config: &AdapterConfig, checkpoint: &Checkpoint, encoder: &Encoder) -> Result<AdapterState> {
    config.validate()?;
    checkpoint.head.validate()?;
    let expected = encoder.spec().fingerprint();
    if checkpoint.encoder != expected {
        return Err(Error::Contract(format!(
            "checkpoint was trained on encoder {} but adaptation uses {}",
            crate::hash::to_hex(&checkpoint.encoder),
            crate::hash::to_hex(&expected)
        )));
    }
    if checkpoint.head.feature_dim() != encoder.feature_dim() {
        return Err(Error::shape(
            "adapter_init",
            encoder.feature_dim(),
            checkpoint.head.feature_dim(),
        ));
    }
    let head = checkpoint.head.clone();
    Ok(match config.method {
        Method::NoTta => AdapterState::NoTta(head),
        Method::Tent => AdapterState::Tent(TentState::new(head, config.tent)),
        Method::Shot => AdapterState::Shot(ShotState::new(head, config.shot)?),
        Method::T3a => AdapterState::T3a(T3aState::new(head, config.t3a)?),
    })
}

/// Per-batch record for the optional trace stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchDiagnostics {
    pub batch: usize,
    pub size: usize,
    pub mean_entropy: f64,
    /// Objective value before the batch's first update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_terms: Option<ShotLossTerms>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub support_sizes: Vec<usize>,
}

impl BatchDiagnostics {
    pub fn from_probs(batch: usize, probs: &Matrix<f32>) -> Self {
        let ent = row_entropies(probs);
        let mean = if ent.is_empty() {
            0.0
        } else {
            ent.iter().map(|&e| f64::from(e)).sum::<f64>() / ent.len() as f64
        };
        Self {
            batch,
            size: probs.rows(),
            mean_entropy: mean,
            loss: None,
            loss_terms: None,
            support_sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    /// `N × K`, in stream order.
    pub probs: Matrix<f32>,
    pub state: AdapterState,
}

fn with_batch(batch: usize, e: Error) -> Error {
    match e {
        e @ Error::Adaptation { .. } => e,
        other => Error::Adaptation {
            batch,
            reason: format!("{other}"),
        },
    }
}

/// Run one method over the target stream in fixed-size sequential batches.
pub fn run_adaptation(
    config: &AdapterConfig,
    checkpoint: &Checkpoint,
    encoder: &Encoder,
    target: &UnlabeledBatch,
    batch_size: usize,
    mut trace: Option<&mut dyn FnMut(&BatchDiagnostics)>,
) -> Result<AdaptationOutcome> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if target.is_empty() {
        return Err(Error::Data("target stream is empty".into()));
    }
    let mut state = adapter_init(config, checkpoint, encoder)?;
    if let AdapterState::Shot(s) = &mut state {
        // offline: the trace covers the adaptation pass, not the final predict
        s.adapt(encoder, target, batch_size, trace.take())?;
    }
    let z = encoder.encode(target)?.z;
    let n = z.rows();
    let mut parts = Vec::with_capacity(n.div_ceil(batch_size));
    for (batch, start) in (0..n).step_by(batch_size).enumerate() {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let (probs, diag) = state
            .process(&z.select_rows(&idx), batch)
            .map_err(|e| with_batch(batch, e))?;
        if let Some(sink) = trace.as_mut() {
            sink(&diag);
        }
        parts.push(probs);
    }
    Ok(AdaptationOutcome {
        probs: Matrix::vstack(&parts)?,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_proba, EncoderKind, EncoderSpec};
    use crate::numerics::Rng;
    use alloc::vec;

    fn fixture(k: usize) -> (Checkpoint, Encoder, UnlabeledBatch) {
        let enc = Encoder::new(EncoderSpec::new(EncoderKind::Identity, 6, 1)).unwrap();
        let mut rng = Rng::new(11);
        let head = HeadParams::<f32>::init(6, k, 16, &mut rng);
        let n = 37;
        let data = (0..n * 6).map(|_| rng.normal() as f32).collect();
        let target = UnlabeledBatch {
            channels: 6,
            samples: 1,
            data,
            record_ids: (0..n as u64).collect(),
        };
        let ck = Checkpoint {
            head,
            encoder: enc.spec().fingerprint(),
        };
        (ck, enc, target)
    }

    #[test]
    fn no_tta_is_plain_inference() {
        let (ck, enc, target) = fixture(3);
        for bs in [1, 8, 64] {
            let out = run_adaptation(&AdapterConfig::new(Method::NoTta), &ck, &enc, &target, bs, None).unwrap();
            assert_eq!(out.probs, predict_proba(&ck.head, &enc, &target).unwrap());
        }
    }

    #[test]
    fn encoder_mismatch_is_rejected() {
        let (mut ck, enc, target) = fixture(2);
        ck.encoder = [7; 32];
        let err = run_adaptation(&AdapterConfig::new(Method::Tent), &ck, &enc, &target, 8, None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn episodic_is_rejected() {
        let cfg = AdapterConfig {
            episodic: true,
            ..AdapterConfig::new(Method::Tent)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn trace_sees_every_batch() {
        let (ck, enc, target) = fixture(2);
        for m in Method::ALL {
            let mut seen = vec![];
            let mut sink = |d: &BatchDiagnostics| seen.push((d.batch, d.size));
            run_adaptation(&AdapterConfig::new(m), &ck, &enc, &target, 10, Some(&mut sink)).unwrap();
            assert_eq!(seen, vec![(0, 10), (1, 10), (2, 10), (3, 7)], "{m:?}");
        }
    }

    #[test]
    fn shot_keeps_classifier_fixed() {
        let (ck, enc, target) = fixture(3);
        let out = run_adaptation(&AdapterConfig::new(Method::Shot), &ck, &enc, &target, 8, None).unwrap();
        let h = out.state.head();
        assert_eq!(h.w2, ck.head.w2);
        assert_eq!(h.b2, ck.head.b2);
        assert_ne!(h.w1, ck.head.w1);
    }

    #[test]
    fn tent_touches_only_norm_affine() {
        let (ck, enc, target) = fixture(3);
        let out = run_adaptation(&AdapterConfig::new(Method::Tent), &ck, &enc, &target, 8, None).unwrap();
        let h = out.state.head();
        assert_ne!(h.ln_gamma, ck.head.ln_gamma);
        assert_eq!(
            (&h.w1, &h.b1, &h.w2, &h.b2),
            (&ck.head.w1, &ck.head.b1, &ck.head.w2, &ck.head.b2)
        );
    }
}
