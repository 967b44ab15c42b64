//! Semi-supervised teacher-student segmentation of vessels in partially
//! annotated 3D volumes.
//!
//! The crate covers the whole pipeline: volume I/O ([`volume`]), resampling,
//! histogram-based background suppression and patch grouping ([`preprocess`]),
//! segmentation networks on a small reverse-mode tape ([`nn`], [`backbone`]),
//! the supervised and consistency losses ([`losses`]), EMA-coupled training
//! ([`trainer`]), mesh-based evaluation ([`metrics`]) and synthetic vascular
//! phantoms ([`phantom`]).

pub mod backbone;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
