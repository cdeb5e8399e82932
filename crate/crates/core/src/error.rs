//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Optimizer or trainer invoked in a state that cannot support the call.
    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("plan error: {0}")]
    Plan(String),

    /// A backbone id that has no projection registered in the side-network.
    #[error("unknown backbone `{0}`: no projection registered")]
    Identity(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("phase error: {0}")]
    Phase(String),

    /// The local shard has been fully consumed.
    #[error("end of data for client {0}")]
    EndOfData(u32),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
