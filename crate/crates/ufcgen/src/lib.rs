//! Two-stage conditional image synthesis at desk scale.
//!
//! Stage one turns images into grids of discrete code-words via a k-means
//! patch codebook. Stage two is a bidirectional transformer over a unified
//! token sequence of textual, visual, and preservation controls plus the
//! target grid, trained with masked sequence modeling and two auxiliary
//! heads (relevance, fidelity). Decoding is progressive non-autoregressive
//! refinement with candidate scoring, alongside mask-predict and
//! autoregressive baselines and a latency/compliance benchmark harness.

pub mod bench;
pub mod codec;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod nn;
pub mod ppm;
pub mod rng;
pub mod train;
pub mod vq;

pub(crate) mod bytes;

pub use error::{Error, Result};
