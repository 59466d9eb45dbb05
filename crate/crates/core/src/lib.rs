//! Self-adapting traffic-sign classification pipeline.
//!
//! The crate covers a desk-scale closed loop for keeping a small visual
//! classifier usable as signs weather in the field:
//!
//! 1. a variational prototyping encoder maps observations into a latent
//!    space organized around per-class prototype images,
//! 2. a novelty monitor flags observations that drift away from the known
//!    classes and buffers them,
//! 3. a style-transfer augmenter turns the buffered unknowns into labeled
//!    synthetic training data,
//! 4. an adaptation cycle retrains the encoder on a mix of original and
//!    augmented data with a consistency penalty against the frozen
//!    pre-adaptation model, and
//! 5. an experiment harness measures the before/after quality matrix.

pub mod adapt;
pub mod data;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod monitor;
pub mod nn;
pub mod rng;
pub mod style;
pub mod tensor_store;
pub mod vpe;

pub use data::{LabeledSample, Origin, SignClassSpec, SignShape};
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use tensor_store::TensorStore;
pub use vpe::{EncodeMode, LatentCode, PrototypeCatalog, VpeParams};
