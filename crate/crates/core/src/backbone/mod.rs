//! Segmentation networks shared by teacher and student.
//!
//! Two interchangeable variants satisfy one contract: a single-channel patch
//! `[p, p, p]` maps to 2-class per-voxel probabilities `[2, p, p, p]`
//! (class 0 background, class 1 vessel).

mod checkpoint;
mod conv_unet;
mod network;
mod swin_unet;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};
pub use network::{
    build_network, logits_to_prediction, softmax_backward, NetworkConfig, NetworkVariant, ParamMap, Prediction,
    SegmentationNetwork,
};
