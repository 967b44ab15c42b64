//! A small reverse-mode automatic differentiation tape over channel-first
//! `[C, D, H, W]` float tensors, with exactly the operations the segmentation
//! backbones need.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
