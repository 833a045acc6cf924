use std::fmt;

use thiserror::Error;

/// Resource dimension that a placement can exhaust.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    Cores,
    Ram,
    Frequency,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Cores => "cores",
            Resource::Ram => "ram",
            Resource::Frequency => "frequency",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient {resource} on {pm} for {vm}")]
    Capacity { pm: String, vm: String, resource: Resource },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{vm} is already on {pm}")]
    NoOp { vm: String, pm: String },

    #[error("no price for location {location} at hour {hour}")]
    Coverage { location: String, hour: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
