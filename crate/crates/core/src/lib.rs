//! Induces a single provenance-tagged decision graph from a long,
//! page-ordered guideline document, and scores such graphs against a
//! reference.
//!
//! The pipeline has three stages:
//!
//! 1. [`chunker`] splits the core pages into chunks with explicit entry and
//!    terminal interfaces.
//! 2. [`builder`] expands each chunk into a graph by breadth-first worklist
//!    expansion with duplicate suppression.
//! 3. [`aggregator`] unions the chunk graphs and merges cross-chunk
//!    duplicates while rewiring edges.
//!
//! Every semantic judgment goes through an [`oracle::Oracle`], backed either
//! by an OpenAI-compatible endpoint or by recorded fixtures.

pub mod aggregator;
pub mod builder;
pub mod chunker;
pub mod config;
pub mod dot;
pub mod error;
pub mod eval;
pub mod graph;
pub mod manifest;
pub mod model;
pub mod normalize;
pub mod oracle;
pub mod pipeline;
pub mod retrieval;

pub use config::PipelineConfig;
pub use error::{Error, GraphError, OracleError, Result};
pub use graph::{DecisionEdge, DecisionGraph, DecisionNode, NodeId, NodeKind, QueueItem};
pub use model::{Chunk, GuidelineProfile, PageLabel, PageRecord};
