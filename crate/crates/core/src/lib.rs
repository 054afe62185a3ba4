//! Mood prediction from short video chunks using mood and emotion-change labels.
//!
//! This crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! pipeline: valence banding and chunk labelling, a small reverse-mode autodiff
//! tape over `f64` tensors, the 1-CNN / 2-CNN+MLP / 2-CNN / TS-Net classifiers,
//! spatial and temporal attention gates, subject-independent cross-validation,
//! accuracy and significance statistics, and Grad-CAM maps.
//!
//! File formats, image decoding and the command line live in the `moodshift`
//! companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cam;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod labels;
pub mod loss;
pub mod models;
pub mod nn;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::MoodClass;
pub use tensor::Tensor;
