//! Numeric primitives: matrices, layer kernels with hand-derived gradients,
//! losses, optimizers and the seeded random stream.

mod layers;
mod loss;
mod matrix;
mod optim;
mod real;
mod rng;

pub use layers::{
    dropout_mask, gelu, gelu_backward, gelu_forward, gelu_grad, layernorm_backward, layernorm_forward, linear_backward,
    linear_forward, GeluCache, LayerNormCache, LinearCache, LAYERNORM_EPS,
};
pub use loss::{cross_entropy, entropy, mean_entropy, row_entropies, softmax};
pub use matrix::Matrix;
pub use optim::{adamw_step, sgd_momentum_step, AdamWHyper, OptimizerKind, OptimizerState, SgdHyper};
pub use real::Real;
pub use rng::{Rng, ALGORITHM as RNG_ALGORITHM};
