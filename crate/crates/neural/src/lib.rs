//! Minimal differentiable tensor engine.
//!
//! Just enough machinery to express and train 2D / 2.5D convolutional voxel
//! classifiers on the CPU: dilated valid convolutions, max pooling, dense
//! layers, ELU, softmax, dropout and batch normalization with hand-written
//! backward passes, cross-entropy, Adam, receptive-field arithmetic, a
//! versioned weights container and a finite-difference gradient checker.
//!
//! Every kernel is generic over [`Real`] so the same code runs in `f32` for
//! training and `f64` for gradient verification.

mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod ops;
pub mod optim;
mod real;
pub mod spec;
mod tensor;
pub mod weights;

pub use error::{NeuralError, Result};
pub use layer::{ForwardCtx, Layer, Mode, ParamSlot, Sequential};
pub use loss::cross_entropy;
pub use optim::{AdamConfig, OptimizerState};
pub use real::{gemm, Real, Strides};
pub use spec::{fingerprint, receptive_field, LayerSpec};
pub use tensor::Tensor;
pub use weights::{Model, NamedTensor, NetworkWeights};
