//! Single-tower vision-language contrastive learning at desk scale.
//!
//! One transformer processes patch-grid "images", symbol-sequence "texts" and
//! their concatenation with shared weights. The crate bundles a small tensor
//! library with reverse-mode autodiff, the attention decomposition verifier,
//! the encoder, the contrastive and masked-modeling objectives, a synthetic
//! paired-scene generator, evaluation metrics and the training loop.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod snapshot;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::{Element, Tensor};
