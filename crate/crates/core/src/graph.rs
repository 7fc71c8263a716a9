//! Directed, condition-labeled decision graphs and the primitive mutations
//! used while expanding and merging them.
//!
//! Edges form a set keyed by `(source, label, target)`. Mutations that would
//! create a self-loop drop the edge and hand it back to the caller so it can
//! be logged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::normalize::{normalize_condition, normalize_label};

pub const GRAPH_FORMAT: &str = "guidegraph.graph";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Chunk-scoped id, unique across a document as long as chunk ids are.
    pub fn scoped(chunk: u32, seq: u32) -> Self {
        Self(format!("c{chunk:03}.n{seq:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entry,
    Terminal,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergedFrom {
    pub node_id: NodeId,
    pub origin_chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionNode {
    pub node_id: NodeId,
    pub label: String,
    pub kind: NodeKind,
    pub origin_chunk: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merged_from: Vec<MergedFrom>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance_pages: Vec<u32>,
    /// Other normalized labels that were resolved to this node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl DecisionNode {
    pub fn new(node_id: NodeId, label: impl Into<String>, kind: NodeKind, origin_chunk: u32) -> Self {
        Self {
            node_id,
            label: label.into(),
            kind,
            origin_chunk,
            merged_from: Vec::new(),
            provenance_pages: Vec::new(),
            aliases: Vec::new(),
        }
    }

    pub fn answers_to(&self, normalized: &str) -> bool {
        self.label == normalized || self.aliases.iter().any(|a| a == normalized)
    }

    pub fn add_alias(&mut self, normalized: &str) {
        if self.label != normalized && !self.aliases.iter().any(|a| a == normalized) {
            self.aliases.push(normalized.to_string());
            self.aliases.sort();
        }
    }

    /// Ids of every original node folded into this one, including itself.
    pub fn members(&self) -> impl Iterator<Item = &NodeId> {
        std::iter::once(&self.node_id).chain(self.merged_from.iter().map(|m| &m.node_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecisionEdge {
    pub source: NodeId,
    pub label: String,
    pub target: NodeId,
}

impl DecisionEdge {
    pub fn new(source: impl Into<NodeId>, label: impl Into<String>, target: impl Into<NodeId>) -> Self {
        Self {
            source: source.into(),
            label: label.into(),
            target: target.into(),
        }
    }

    pub fn is_self_loop(&self) -> bool {
        self.source == self.target
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&NodeId> for NodeId {
    fn from(id: &NodeId) -> Self {
        id.clone()
    }
}

/// Incoming context of a queued candidate: the ancestor and the condition on
/// the edge from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incoming {
    pub ancestor: NodeId,
    pub condition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub candidate_label: String,
    pub incoming: Option<Incoming>,
}

impl QueueItem {
    pub fn root(label: impl Into<String>) -> Self {
        Self {
            candidate_label: label.into(),
            incoming: None,
        }
    }

    pub fn child(label: impl Into<String>, ancestor: NodeId, condition: impl Into<String>) -> Self {
        Self {
            candidate_label: label.into(),
            incoming: Some(Incoming {
                ancestor,
                condition: condition.into(),
            }),
        }
    }
}

/// Result of a merge: the edges that collapsed into self-loops, in their
/// pre-rewiring form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeOutcome {
    pub suppressed: Vec<DecisionEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionGraph {
    nodes: BTreeMap<NodeId, DecisionNode>,
    edges: BTreeSet<DecisionEdge>,
}

impl DecisionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &DecisionNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &DecisionEdge> {
        self.edges.iter()
    }

    pub fn edge_set(&self) -> &BTreeSet<DecisionEdge> {
        &self.edges
    }

    pub fn node(&self, id: &NodeId) -> Option<&DecisionNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut DecisionNode> {
        self.nodes.get_mut(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, edge: &DecisionEdge) -> bool {
        self.edges.contains(edge)
    }

    pub fn incoming(&self, id: &NodeId) -> impl Iterator<Item = &DecisionEdge> {
        let id = id.clone();
        self.edges.iter().filter(move |e| e.target == id)
    }

    pub fn outgoing(&self, id: &NodeId) -> impl Iterator<Item = &DecisionEdge> {
        let id = id.clone();
        self.edges.iter().filter(move |e| e.source == id)
    }

    /// Inserts a fully formed node. Fails on id collision.
    pub fn insert_node(&mut self, node: DecisionNode) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.node_id) {
            return Err(GraphError::IdCollision(node.node_id));
        }
        self.nodes.insert(node.node_id.clone(), node);
        Ok(())
    }

    /// Inserts an edge between existing nodes. Returns `false` if it was
    /// already present. Self-loops are rejected.
    pub fn insert_edge(&mut self, edge: DecisionEdge) -> Result<bool, GraphError> {
        for end in [&edge.source, &edge.target] {
            if !self.nodes.contains_key(end) {
                return Err(GraphError::MissingNode(end.clone()));
            }
        }
        if edge.is_self_loop() {
            return Err(GraphError::SelfLoop(edge.source));
        }
        Ok(self.edges.insert(edge))
    }

    pub fn remove_edge(&mut self, edge: &DecisionEdge) -> bool {
        self.edges.remove(edge)
    }

    /// Next free id in the `chunk` scope.
    pub fn fresh_id(&self, chunk: u32) -> NodeId {
        let mut seq = self.nodes.len() as u32 + 1;
        loop {
            let id = NodeId::scoped(chunk, seq);
            if !self.nodes.contains_key(&id) {
                return id;
            }
            seq += 1;
        }
    }

    /// Adds a node for `item` and, when the item has incoming context, the
    /// edge from its ancestor.
    pub fn register_node(
        &mut self,
        item: &QueueItem,
        kind: NodeKind,
        origin_chunk: u32,
    ) -> Result<NodeId, GraphError> {
        let label = normalize_label(&item.candidate_label)?;
        if let Some(incoming) = &item.incoming {
            if !self.nodes.contains_key(&incoming.ancestor) {
                return Err(GraphError::MissingAncestor(incoming.ancestor.clone()));
            }
        }
        let id = self.fresh_id(origin_chunk);
        self.nodes
            .insert(id.clone(), DecisionNode::new(id.clone(), label, kind, origin_chunk));
        if let Some(incoming) = &item.incoming {
            self.edges.insert(DecisionEdge {
                source: incoming.ancestor.clone(),
                label: normalize_condition(&incoming.condition),
                target: id.clone(),
            });
        }
        Ok(id)
    }

    /// Replaces `(a, e, u)` by `(a, e, new_target)`. The old edge need not
    /// exist. Returns the suppressed edge if the result would be a self-loop.
    pub fn redirect_ancestor_edge(
        &mut self,
        from: &DecisionEdge,
        new_target: &NodeId,
    ) -> Result<Option<DecisionEdge>, GraphError> {
        if !self.nodes.contains_key(new_target) {
            return Err(GraphError::MissingNode(new_target.clone()));
        }
        if !self.nodes.contains_key(&from.source) {
            return Err(GraphError::MissingAncestor(from.source.clone()));
        }
        self.edges.remove(from);
        let redirected = DecisionEdge {
            source: from.source.clone(),
            label: from.label.clone(),
            target: new_target.clone(),
        };
        if redirected.is_self_loop() {
            return Ok(Some(redirected));
        }
        self.edges.insert(redirected);
        Ok(None)
    }

    /// Folds `secondary` into `primary`: rewires all incident edges, removes
    /// `secondary`, and records its provenance on `primary`.
    pub fn merge_nodes(
        &mut self,
        primary: &NodeId,
        secondary: &NodeId,
    ) -> Result<MergeOutcome, GraphError> {
        if primary == secondary {
            return Err(GraphError::InvalidMerge(primary.clone()));
        }
        for id in [primary, secondary] {
            if !self.nodes.contains_key(id) {
                return Err(GraphError::MissingNode(id.clone()));
            }
        }

        let touching: Vec<DecisionEdge> = self
            .edges
            .iter()
            .filter(|e| &e.source == secondary || &e.target == secondary)
            .cloned()
            .collect();
        let mut outcome = MergeOutcome::default();
        for edge in touching {
            self.edges.remove(&edge);
            let rewired = DecisionEdge {
                source: if &edge.source == secondary { primary.clone() } else { edge.source.clone() },
                label: edge.label.clone(),
                target: if &edge.target == secondary { primary.clone() } else { edge.target.clone() },
            };
            if rewired.is_self_loop() {
                outcome.suppressed.push(edge);
            } else {
                self.edges.insert(rewired);
            }
        }

        let absorbed = self.nodes.remove(secondary).expect("checked above");
        let target = self.nodes.get_mut(primary).expect("checked above");
        target.merged_from.push(MergedFrom {
            node_id: absorbed.node_id.clone(),
            origin_chunk: absorbed.origin_chunk,
        });
        target.merged_from.extend(absorbed.merged_from);
        target.merged_from.sort();
        target.provenance_pages.extend(absorbed.provenance_pages);
        target.provenance_pages.sort_unstable();
        target.provenance_pages.dedup();
        target.add_alias(&absorbed.label);
        for alias in &absorbed.aliases {
            target.add_alias(alias);
        }
        Ok(outcome)
    }

    /// Referential integrity, no self-loops, non-empty labels.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (id, node) in &self.nodes {
            if id != &node.node_id {
                return Err(GraphError::MissingNode(id.clone()));
            }
            if node.label.is_empty() {
                return Err(GraphError::EmptyLabel);
            }
        }
        for edge in &self.edges {
            if !self.nodes.contains_key(&edge.source) || !self.nodes.contains_key(&edge.target) {
                return Err(GraphError::DanglingEdge {
                    from: edge.source.clone(),
                    to: edge.target.clone(),
                });
            }
            if edge.is_self_loop() {
                return Err(GraphError::SelfLoop(edge.source.clone()));
            }
        }
        Ok(())
    }

    /// Deterministic document form: nodes sorted by id, edges by
    /// `(source, label, target)`, stable key order, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&GraphDocument::from(self.clone()))
            .expect("graph serialization cannot fail");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::try_from(doc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    format: String,
    version: u32,
    nodes: Vec<DecisionNode>,
    edges: Vec<DecisionEdge>,
}

impl From<DecisionGraph> for GraphDocument {
    fn from(graph: DecisionGraph) -> Self {
        Self {
            format: GRAPH_FORMAT.to_string(),
            version: GRAPH_FORMAT_VERSION,
            nodes: graph.nodes.into_values().collect(),
            edges: graph.edges.into_iter().collect(),
        }
    }
}

impl TryFrom<GraphDocument> for DecisionGraph {
    type Error = String;

    fn try_from(doc: GraphDocument) -> Result<Self, String> {
        if doc.format != GRAPH_FORMAT || doc.version != GRAPH_FORMAT_VERSION {
            return Err(format!(
                "unsupported graph format {}/{} (expected {GRAPH_FORMAT}/{GRAPH_FORMAT_VERSION})",
                doc.format, doc.version
            ));
        }
        let mut graph = DecisionGraph::new();
        for node in doc.nodes {
            graph.insert_node(node).map_err(|e| e.to_string())?;
        }
        for edge in doc.edges {
            graph.insert_edge(edge).map_err(|e| e.to_string())?;
        }
        graph.validate().map_err(|e| e.to_string())?;
        Ok(graph)
    }
}

impl Serialize for DecisionGraph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GraphDocument::from(self.clone()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DecisionGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = GraphDocument::deserialize(deserializer)?;
        DecisionGraph::try_from(doc).map_err(serde::de::Error::custom)
    }
}
