//! Dense `f64` tensors, a reverse-mode tape and the operations built on it.

pub mod fft;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use fft::fft2d;
pub use ops::conv::{conv2d, conv3d, ConvSpec};
pub use ops::elementwise::{gelu, sigmoid};
pub use ops::linalg::{layernorm, softmax};
pub use ops::pool::avg_pool2;
pub use params::{fan_in_uniform, ParamId, ParamStore};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
