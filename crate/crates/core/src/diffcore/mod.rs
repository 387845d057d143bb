//! Tensors, tape-based reverse-mode differentiation, MLPs and parameter storage.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{fnv1a64, Checkpoint, FORMAT_VERSION, MAGIC};
pub use mlp::{Activation, MlpSpec, OutputActivation};
pub use params::{ParamVector, Segment, FEATURE_SEGMENT, FIELD_SEGMENT, HEAD_SEGMENT};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{axpy, matvec};
