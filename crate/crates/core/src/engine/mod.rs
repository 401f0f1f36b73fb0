//! Deterministic f64 differentiable runtime for the supported layer kinds.
//!
//! Conv and factorized Conv layers read `I×h×w` and write `O×h×w` (stride 1,
//! zero "same" padding). Recurrent layers read `s` consecutive blocks of `I`
//! values and emit the final hidden state. Every layer but the last is
//! followed by ReLU, except recurrent layers which emit `h_s` as is.

mod layers;
mod loss;
mod model;
mod tensor;

pub use layers::init_layer;
pub use loss::{argmax, cross_entropy, cross_entropy_grad, softmax};
pub use model::{ForwardTrace, MaskedModel, OutputGrads, SampleTrace, GRAD_CHUNK};
pub use tensor::{Gradients, Param};

