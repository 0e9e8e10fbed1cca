//! Numerical core of the spatial-entropy attention regularizer.
//!
//! The pipeline for one attention head is:
//!
//! ```text
//! HeadProjection --similarity_map--> Grid2D (pre-softmax S)
//!     --threshold_map--> B = relu(S - mean(S))
//!     --connected_components--> 8-connected blobs C_1..C_r
//!     --spatial_entropy--> H = -sum P(C_j) ln P(C_j), plus dH/dS
//! ```
//!
//! [`eval`] holds the analysis side: mass thresholding of post-softmax
//! attention rows and Jaccard scoring against ground-truth masks.

pub mod ccl;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod grid;

pub use ccl::{connected_components, largest_components, ComponentLabeling};
pub use entropy::{
    spatial_entropy, spatial_entropy_loss, spatial_entropy_loss_tagged, threshold_map, tv_loss,
    EntropyResult, LossConfig,
};
pub use error::{Error, Result};
pub use eval::{best_head_jaccard, export_map, jaccard, mass_threshold, MassMask};
pub use grid::{cosine_similarity_map, grid_mean, similarity_map, Grid2D, HeadProjection, MapKind, TaggedMap};
