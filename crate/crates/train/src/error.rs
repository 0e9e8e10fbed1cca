use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("degenerate dataset spec: {0}")]
    Dataset(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model and config are incompatible: {0}")]
    Incompatible(String),
    #[error("non-finite loss at epoch {epoch}, step {step}{}", dump.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFinite { epoch: usize, step: usize, dump: Option<PathBuf> },
    #[error(transparent)]
    Vit(#[from] sar_vit::Error),
    #[error(transparent)]
    Core(#[from] sar_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
