use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("label remap table has no entry for class {0}")]
    Mapping(u8),
    #[error("model error: {0}")]
    Model(String),
    #[error("non-finite gradient in parameter `{0}`")]
    Optimizer(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
