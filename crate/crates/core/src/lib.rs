//! Contrastive positive mining for unsupervised skeleton action
//! representation learning.
//!
//! Siamese spatio-temporal graph encoders are trained so that the student
//! branch's similarity distribution over a FIFO queue of past target
//! embeddings matches the target branch's distribution. A second training
//! stage mines the top-K most similar queue entries as non-self positives
//! and raises their target similarity to the maximum before matching.

pub mod augment;
pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod skeleton;
pub mod trainer;

mod container;

pub use error::{Error, Result};
