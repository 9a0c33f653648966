use std::io;
use std::path::PathBuf;

use crate::VertexId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("i/o error: {0}")]
    RawIo(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad binary graph file: {0}")]
    BadBinary(String),
    #[error("vertex {vertex} is not owned by machine {machine}")]
    NotOwned { vertex: VertexId, machine: usize },
    #[error("invalid machine count {0}; need at least one machine")]
    InvalidMachineCount(usize),
    #[error("query graph is disconnected")]
    DisconnectedQuery,
    #[error("query has {0} vertices; at most {max} are supported", max = crate::querymodel::MAX_QUERY_VERTICES)]
    QueryTooLarge(usize),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("vertex {0} is not in the cache")]
    CacheMiss(VertexId),
    #[error("wire format error: {0}")]
    Wire(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("result limit of {0} exceeded")]
    ResultLimit(usize),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
