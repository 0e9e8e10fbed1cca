//! A small Vision Transformer with explicit forward caches and a
//! hand-written backward pass.
//!
//! The last block can drop its MSA residual, the LayerNorm in front of its
//! MLP, and the MLP residual (see [`LastBlockVariant`]). The forward pass
//! exposes the last block's pre-softmax CLS-query/patch-key scores so an
//! auxiliary loss on them can be back-propagated together with the
//! classification loss.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod params;

pub use backward::OutputGrads;
pub use checkpoint::{Checkpoint, NamedTensor};
pub use config::{LastBlockVariant, ViTConfig};
pub use error::{Error, Result};
pub use loss::classification_loss;
pub use model::{ForwardTrace, Model};
pub use params::{BlockParams, Params};
