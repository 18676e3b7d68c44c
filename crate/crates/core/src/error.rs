//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("degenerate matrix")]
    DegenerateMatrix,
    #[error("invalid concentration: {0}")]
    InvalidConcentration(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("invalid class {class} (num_classes = {num_classes})")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("no updates")]
    NoUpdates,
    #[error("insufficient benign updates: need at least {needed}, got {got}")]
    InsufficientBenign { needed: usize, got: usize },
    #[error("trim exceeds population: M = {clients}, A = {attackers}")]
    TrimExceedsPopulation { clients: usize, attackers: usize },
    #[error("krum undefined: M - A - 2 < 1 (M = {clients}, A = {attackers})")]
    KrumUndefined { clients: usize, attackers: usize },
    #[error("no viable defense: {0}")]
    NoViableDefense(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
