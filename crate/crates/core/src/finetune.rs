//! Supervised training of the shared head on labeled source data, with
//! checkpoint selection on a held-out validation split.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::{cohen_kappa, confusion_matrix, roc_auc};
use crate::model::{head_backward, head_forward, Checkpoint, Encoder, HeadParams, Mode, ParamSubset, HIDDEN_DIM};
use crate::numerics::{adamw_step, cross_entropy, softmax, AdamWHyper, Matrix, OptimizerState, Rng};
use crate::shiftbench::{Dataset, Split, Task};
use crate::{Error, Result};

/// Seeded subject-level partition: `floor(ratio · subjects)` subjects train,
/// the rest validate.
pub fn split_patients(subject_ids: &[String], seed: u64, ratio: f64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let unique: BTreeSet<&String> = subject_ids.iter().collect();
    let n = unique.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 subjects to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut subjects: Vec<String> = unique.into_iter().cloned().collect();
    Rng::derive(seed, "split_patients", 0).shuffle(&mut subjects);
    let n_train = (libm::floor(ratio * n as f64) as usize).clamp(1, n - 1);
    let val = subjects.split_off(n_train);
    Ok((subjects.into_iter().collect(), val.into_iter().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    RocAuc,
    CohenKappa,
}

impl SelectionMetric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Binary => SelectionMetric::RocAuc,
            Task::Multiclass(_) => SelectionMetric::CohenKappa,
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    512
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_hidden() -> usize {
    HIDDEN_DIM
}
fn default_dropout() -> f64 {
    crate::model::DROPOUT_RATE
}

/// Head training recipe. The learning rate is constant (no schedule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            hidden: default_hidden(),
            dropout_rate: default_dropout(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch_size and hidden must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(
                "lr must be > 0, weight_decay >= 0, dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub metric: SelectionMetric,
    pub train_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub selected_epoch: usize,
}

/// Index of the best value; the earliest epoch wins ties.
pub fn select_model(history: &[f64]) -> Result<usize> {
    let (first, rest) = history
        .split_first()
        .ok_or_else(|| Error::Data("empty validation history".into()))?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best.0)
}

/// Labeled records of a train or val split, encoded once by the frozen
/// encoder. Test records cannot be wrapped.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub split: Split,
    pub features: Matrix<f32>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn from_split(dataset: &Dataset, split: Split, encoder: &Encoder) -> Result<Self> {
        if split == Split::Test {
            return Err(Error::Contract("training code may not read the test split".into()));
        }
        let idx = dataset.manifest.indices(split);
        if idx.is_empty() {
            return Err(Error::Data(format!("{split:?} split is empty")));
        }
        let mut parts = Vec::new();
        let mut labels = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(1024) {
            let batch = dataset.batch(chunk);
            let y = batch
                .labels
                .clone()
                .ok_or_else(|| Error::Data(format!("{split:?} split has unlabeled records")))?;
            labels.extend(y);
            parts.push(encoder.encode(&batch.strip_labels())?.z);
        }
        Ok(Self {
            split,
            features: Matrix::vstack(&parts)?,
            labels,
        })
    }
}

fn validation_score(metric: SelectionMetric, params: &HeadParams<f32>, val: &LabeledFeatures, k: usize) -> Result<f64> {
    let (logits, _) = head_forward(params, &val.features, Mode::Eval)?;
    let probs = softmax(&logits)?;
    match metric {
        SelectionMetric::RocAuc => {
            let scores: Vec<f64> = (0..probs.rows()).map(|r| f64::from(probs.get(r, 1))).collect();
            let pos: Vec<bool> = val.labels.iter().map(|&y| y == 1).collect();
            roc_auc(&scores, &pos)
        }
        SelectionMetric::CohenKappa => cohen_kappa(&confusion_matrix(&val.labels, &probs.argmax_rows(), k)?),
    }
}

/// Train the head with AdamW on cross-entropy; return the checkpoint of the
/// epoch with the best validation score.
pub fn train_head(
    config: &FinetuneConfig,
    task: Task,
    encoder: &Encoder,
    train: &LabeledFeatures,
    val: &LabeledFeatures,
) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    if train.split != Split::Train || val.split != Split::Val {
        return Err(Error::Contract("train_head needs a train split and a val split".into()));
    }
    let k = task.num_classes();
    for set in [train, val] {
        if set.labels.is_empty() {
            return Err(Error::Data(format!("{:?} split is empty", set.split)));
        }
        if let Some(bad) = set.labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        if set.features.cols() != encoder.feature_dim() {
            return Err(Error::shape("train_head", encoder.feature_dim(), set.features.cols()));
        }
    }
    let metric = SelectionMetric::for_task(task);
    let hyper = config.adamw();
    let mut params = HeadParams::<f32>::init(
        encoder.feature_dim(),
        k,
        config.hidden,
        &mut Rng::derive(config.seed, "head/init", 0),
    );
    params.dropout_rate = config.dropout_rate;
    let mut opt = OptimizerState::adamw(&params.tensor_lens());
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let mut log = TrainingLog {
        metric,
        train_loss: Vec::with_capacity(config.epochs),
        val_metric: Vec::with_capacity(config.epochs),
        selected_epoch: 0,
    };
    let mut best: Option<(f64, HeadParams<f32>)> = None;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        Rng::derive(config.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = train.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut drop_rng = Rng::derive(config.seed, "dropout", step);
            let (logits, cache) = head_forward(&params, &x, Mode::Train(&mut drop_rng))?;
            let (loss, dlogits) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
            let grads = head_backward(&params, &cache, &dlogits, ParamSubset::AllHead)?;
            adamw_step(&mut params.tensors_mut(), &grads.tensors(), &mut opt, &hyper)?;
            step += 1;
        }
        log.train_loss.push(loss_sum / order.len() as f64);
        let score = validation_score(metric, &params, val, k)?;
        log.val_metric.push(score);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, params.clone()));
        }
    }
    log.selected_epoch = select_model(&log.val_metric)?;
    let (_, head) = best.expect("at least one epoch");
    Ok((
        Checkpoint {
            head,
            encoder: encoder.spec().fingerprint(),
        },
        log,
    ))
}

/// Encode both source splits and train; never touches test records.
pub fn finetune_dataset(
    config: &FinetuneConfig,
    dataset: &Dataset,
    encoder: &Encoder,
) -> Result<(Checkpoint, TrainingLog)> {
    let train = LabeledFeatures::from_split(dataset, Split::Train, encoder)?;
    let val = LabeledFeatures::from_split(dataset, Split::Val, encoder)?;
    train_head(config, dataset.manifest.task, encoder, &train, &val)
}
