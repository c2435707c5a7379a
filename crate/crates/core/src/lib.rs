//! A self-contained CNN training engine built around bag-level multiple
//! instance learning: residual networks with hand-derived backward
//! passes, softmax and MIL loss heads, a bag-forming augmentation
//! pipeline, SGD training, and a finite-difference oracle that certifies
//! every analytic gradient.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
