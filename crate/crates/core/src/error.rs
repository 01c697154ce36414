use thiserror::Error;

use crate::roadnet::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed network: {0}")]
    MalformedNetwork(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge ({u}, {v}) references unknown node {missing}")]
    DanglingEdge { u: NodeId, v: NodeId, missing: NodeId },
    #[error("network is disconnected: {reachable} of {total} nodes reachable from node 1")]
    Disconnected { reachable: usize, total: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("coincident points have no bearing")]
    CoincidentPoints,
    #[error("empty network")]
    EmptyNetwork,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("degenerate tracklet: {0}")]
    DegenerateTracklet(String),
    #[error("sequence of {len} tokens exceeds the maximum input length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("schema error in {file}: {detail}")]
    Schema { file: String, detail: String },
    #[error(transparent)]
    Nd(#[from] camtraj_nd::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
