//! Training harness for the regularized mini-ViT.
//!
//! A run generates a synthetic shape dataset ([`data`]), trains with
//! `L_ce + lambda * L_aux` under AdamW and a cosine schedule ([`trainer`]),
//! and logs per-epoch metrics ([`runlog`]). Everything random derives from
//! the single `seed` in [`TrainConfig`].

pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod runlog;
pub mod trainer;

pub use config::{AuxLoss, Schedule, TrainConfig};
pub use data::{generate_dataset, DatasetSpec, PlacedShape, ShapeKind, ShapeSample};
pub use error::{Error, Result};
pub use optim::{AdamW, CosineSchedule};
pub use runlog::{EpochRecord, EvalMetrics, RunLog};
pub use trainer::{evaluate, evaluate_samples, init_model, train, RunOptions, RunSeeds, SampleEval, Session, StepInfo, TrainData};
