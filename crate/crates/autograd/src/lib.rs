//! Tape-based reverse-mode automatic differentiation over `f64` NCHW
//! tensors, sized for small convolutional nets trained on a CPU.
//!
//! Convolution, bilinear resampling and channel softmax fan out over
//! rayon when the `parallel` feature is on (the default); see [`par`].

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use graph::{log_sigmoid, sigmoid, Grads, Graph, Var};
pub use nn::{Conv2d, Scope};
pub use optim::{clip_grad_norm, Adam, PolySchedule, Sgd};
pub use params::{ParamId, ParamStore, StoreError};
pub use tensor::Tensor;
