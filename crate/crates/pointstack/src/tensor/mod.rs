//! Dense 2-D matrices, trainable parameters, and the reverse-mode tape.
//!
//! All higher modules compose the differentiable building blocks recorded on
//! [`Tape`]: matrix product, row softmax, affine/linear transform, batch
//! normalization, ReLU, dropout, gather/scatter style reshuffles, and the
//! fused ops the network needs (global-std normalization, chunked row max,
//! label-smoothed cross entropy). Precision is a type parameter: `f32` is
//! the training default, `f64` is used by the verification suites.

mod matrix;
mod param;
mod scalar;
mod tape;

pub use matrix::DenseMatrix;
pub use param::{Parameter, Parameters};
pub use scalar::Scalar;
pub use tape::{BatchNormState, NodeId, Phase, Tape, BATCH_NORM_EPSILON, BATCH_NORM_MOMENTUM};
