//! Minimal CPU tensor engine: NCHW tensors, convolution layers and
//! normalization with hand-written backward passes.

pub mod layers;
pub mod network;
pub mod tensor;

pub use layers::{Activation, Mode, NormKind, PadMode};
pub use network::{Layer, NetBuilder, Network, Tape};
pub use tensor::{Real, Tensor};
