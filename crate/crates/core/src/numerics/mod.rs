//! Dense tensors, reverse-mode differentiation and the neural primitives the
//! tracker and refiner are built from.

pub mod gradcheck;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_many};
pub use nn::{
    conv1d_temporal, feed_forward, layer_norm, linear, multi_head_attention, AttentionVars,
    LAYER_NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
