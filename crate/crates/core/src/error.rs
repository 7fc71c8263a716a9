use std::path::PathBuf;

use thiserror::Error;

use crate::graph::{DecisionGraph, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the primitive graph mutations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("ancestor node {0} does not exist")]
    MissingAncestor(NodeId),
    #[error("node {0} does not exist")]
    MissingNode(NodeId),
    #[error("cannot merge node {0} into itself")]
    InvalidMerge(NodeId),
    #[error("node id {0} is already present")]
    IdCollision(NodeId),
    #[error("edge {from} -> {to} references a missing node")]
    DanglingEdge { from: NodeId, to: NodeId },
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("oracle transport failure: {0}")]
    Transport(String),
    #[error("oracle protocol failure on {task}: {reason}")]
    Protocol { task: String, reason: String },
}

impl OracleError {
    pub fn protocol(task: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Protocol {
            task: task.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("profile extraction failed: {0}")]
    Profile(String),
    #[error("chunk {chunk} interface invalid: {reason}")]
    ChunkInterface { chunk: u32, reason: String },
    #[error("chunk {chunk} expansion exceeded the cap of {cap} nodes")]
    ExpansionBudgetExceeded {
        chunk: u32,
        cap: usize,
        partial: Box<DecisionGraph>,
    },
    #[error("chunk {chunk}: interface label {label:?} does not resolve to a node")]
    InterfaceResolution { chunk: u32, label: String },
    #[error("{stage} failed{}: {source}", page.map(|p| format!(" at page {p}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        page: Option<u32>,
        #[source]
        source: Box<Error>,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit codes reported by the command-line front end.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MANIFEST: i32 = 3;
    pub const ORACLE_TRANSPORT: i32 = 4;
    pub const ORACLE_PROTOCOL: i32 = 5;
    pub const STRUCTURAL: i32 = 6;
    pub const BUDGET: i32 = 7;
    pub const CONFIG: i32 = 8;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, page: Option<u32>) -> Self {
        Self::Stage {
            stage,
            page,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Self::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Self::Oracle(OracleError::Transport(_)) => exit_code::ORACLE_TRANSPORT,
            Self::Oracle(OracleError::Protocol { .. }) | Self::Profile(_) => {
                exit_code::ORACLE_PROTOCOL
            }
            Self::ExpansionBudgetExceeded { .. } => exit_code::BUDGET,
            Self::Manifest(_) => exit_code::MANIFEST,
            Self::Config(_) => exit_code::CONFIG,
            Self::Usage(_) => exit_code::USAGE,
            Self::Graph(_)
            | Self::ChunkInterface { .. }
            | Self::InterfaceResolution { .. }
            | Self::Artifact { .. }
            | Self::Json(_) => exit_code::STRUCTURAL,
            Self::Io { .. } => exit_code::IO,
            Self::Stage { .. } => unreachable!("root() strips stage wrappers"),
        }
    }
}
