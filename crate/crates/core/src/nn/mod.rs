//! Minimal dense feed-forward engine: row-major matrices, layers with
//! optional batch normalization and inverted dropout, exact reverse-mode
//! gradients and first-order optimizers. All arithmetic is `f64`.

mod loss;
mod matrix;
mod mlp;
mod optim;

pub use loss::{bce_loss, sigmoid, softmax_backward, softmax_rowwise, BCE_EPS};
pub use matrix::Matrix;
pub use mlp::{
    Activation, BatchNorm, DenseLayer, ForwardTrace, Gradients, LayerGrads, LayerSpec,
    LayerTrace, Mlp, Mode, BN_EPS, BN_MOMENTUM,
};
pub use optim::{Algorithm, Optimizer, OptimizerConfig};
