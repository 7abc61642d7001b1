//! Desk-scale video instance segmentation with inter-frame communication
//! transformers.
//!
//! The crate contains the full pipeline: a reverse-mode tensor engine with
//! FLOP instrumentation, transformer building blocks, the memory-token clip
//! encoder with its three baseline variants, a conditional-convolution mask
//! decoder, mask-based set matching and losses, a clip-stitching tracker, an
//! analytic complexity model, a synthetic moving-shapes dataset, a space-time
//! mask AP evaluator, and an AdamW training loop.

pub mod complexity;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{FlopKind, FlopSnapshot, Graph, Tensor};
