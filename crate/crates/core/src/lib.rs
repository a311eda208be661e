//! Triplane-based multi-camera tokenization.
//!
//! Posed camera images are lifted into a fixed-size triplane by
//! projection-guided attention ([`lifting`]), the triplane is trained
//! self-supervised by volumetric rendering ([`renderer`]), and finally cut
//! into a token sequence whose length depends only on the triplane and patch
//! sizes ([`tokenizer`]). [`harness`] ties these together into training,
//! evaluation and an inference-cost profiler.

pub mod geometry;
pub mod harness;
pub mod lifting;
pub mod ndtensor;
pub mod par;
pub mod renderer;
pub mod tokenizer;
pub mod triplane;

pub use ndtensor::{ParamStore, Tensor, TensorError};
