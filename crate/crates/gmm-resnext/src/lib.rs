//! Speaker verification toolkit built around log Gaussian probability (LGP)
//! features: a diagonal GMM scores each frame against its components, and a
//! ResNext-style 1-D convolutional network with multi-layer feature
//! aggregation and attentive statistics pooling turns the score maps into
//! fixed-length speaker embeddings compared by cosine similarity.
//!
//! See the `examples/` directory for one runnable example per capability,
//! or the `gmm-resnext` binary for the staged command-line pipeline.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod model;
pub mod nncore;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
