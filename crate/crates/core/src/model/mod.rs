//! Frozen encoder `g` plus the shared head `h`, composed as `f(x) = h(g(x))`.

mod checkpoint;
mod encoder;
mod head;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{Encoder, EncoderKind, EncoderSpec, FeatureBatch};
pub use head::{
    head_backward, head_forward, mean_pool, trunk_forward, HeadCache, HeadGrads, HeadParams, Mode, ParamSubset,
    BLOCK_NAMES, DROPOUT_RATE, HIDDEN_DIM,
};

use crate::numerics::{softmax, Matrix};
use crate::shiftbench::UnlabeledBatch;
use crate::Result;

/// `softmax(h(g(x)))` in eval mode.
pub fn predict_proba(params: &HeadParams<f32>, encoder: &Encoder, batch: &UnlabeledBatch) -> Result<Matrix<f32>> {
    let features = encoder.encode(batch)?;
    let (logits, _) = head_forward(params, &features.z, Mode::Eval)?;
    softmax(&logits)
}
