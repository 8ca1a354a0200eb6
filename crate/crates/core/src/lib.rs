//! Label-free generative pretraining of visual-relation contexts.
//!
//! A conditional VAE encodes the `<subject, object>` context of a relation
//! (labels, boxes and image appearance) into a latent code without ever
//! seeing predicates. Small heads trained on a handful of labelled examples
//! then classify predicates from that code.

pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod fewshot;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
