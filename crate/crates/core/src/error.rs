use thiserror::Error;

use crate::wire::WireError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("region overlaps an existing registration")]
    Overlap,
    #[error("unknown device group {0}")]
    UnknownDevice(usize),
    #[error("unknown or foreign memory handle")]
    UnknownRegion,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("immediate {0} already armed")]
    AlreadyArmed(u32),
    #[error("delivery failed: {0}")]
    Delivery(String),
    #[error("operation cancelled")]
    Cancelled,
    #[error("engine is shut down")]
    Shutdown,
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;
