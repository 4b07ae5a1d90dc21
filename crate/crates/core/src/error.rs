//! Error types for the data, training, and inference paths. Graph-level
//! errors live in [`crate::tensor::TensorError`].

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: file contains no examples")]
    EmptyFile { path: PathBuf },
    #[error("subset size {size} exceeds corpus size {available}")]
    SubsetTooLarge { size: usize, available: usize },
    #[error("quintile partition needs at least 5 classes, corpus has {classes}")]
    TooFewClasses { classes: usize },
}

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("corpus has fewer than 2 utterances")]
    CorpusTooSmall,
    #[error("positive pool requested but no class has 2 or more members")]
    NoPositivePairs,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test corpus is empty")]
    EmptyTestSet,
    #[error("nearest-neighbor scores are all zero (empty index)")]
    EmptyIndex,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}
