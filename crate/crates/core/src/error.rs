use thiserror::Error;

use crate::resource::ResourceReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid device profile: {0}")]
    InvalidProfile(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible rewrite: {0}")]
    IncompatibleRewrite(String),

    #[error("non-finite value encountered: {0}")]
    Diverged(String),

    #[error("no rewrite sequence satisfies the device budget")]
    Infeasible(Box<ResourceReport>),

    #[error("no candidate satisfies the device budget: {0}")]
    AllInfeasible(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
