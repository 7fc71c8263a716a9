//! Request payloads and reply schemas for every oracle task.
//!
//! Replies are decoded strictly: unknown fields, missing fields and wrong
//! types are all rejected.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{PageLabel, PageRecord};

use super::Task;

/// A typed oracle call: the payload type knows its task and its reply schema.
pub trait OracleTask: Serialize {
    const TASK: Task;
    type Reply: DeserializeOwned + Serialize;

    /// Semantic checks beyond the schema, e.g. indices within range.
    fn check_reply(&self, _reply: &Self::Reply) -> Result<(), String> {
        Ok(())
    }

    /// One-line description stored next to recorded fixtures.
    fn summary(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageView {
    pub index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl From<&PageRecord> for PageView {
    fn from(page: &PageRecord) -> Self {
        Self {
            index: page.index,
            text: page.text.clone(),
            image_ref: page.image_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEdge {
    pub label: String,
    pub condition: String,
}

fn clip(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() > 60 {
        format!("{}...", flat.chars().take(60).collect::<String>())
    } else {
        flat
    }
}

fn page_list(pages: &[PageView]) -> String {
    pages
        .iter()
        .map(|p| p.index.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// profile

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractProfile {
    pub pages: Vec<PageView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileReply {
    pub metadata: BTreeMap<String, String>,
    pub scope_context: String,
}

impl OracleTask for ExtractProfile {
    const TASK: Task = Task::ExtractProfile;
    type Reply = ProfileReply;

    fn summary(&self) -> String {
        format!("header pages [{}]", page_list(&self.pages))
    }
}

// page classification

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyPage {
    pub page: PageView,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyReply {
    pub label: PageLabel,
}

impl OracleTask for ClassifyPage {
    const TASK: Task = Task::ClassifyPage;
    type Reply = ClassifyReply;

    fn summary(&self) -> String {
        format!("page {}: {}", self.page.index, clip(&self.page.text))
    }
}

// boundary prediction

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictBoundary {
    pub buffer: Vec<PageView>,
    pub current: PageView,
    pub lookahead: Option<PageView>,
    pub context: String,
    pub budget: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryReply {
    pub cut: bool,
}

impl OracleTask for PredictBoundary {
    const TASK: Task = Task::PredictBoundary;
    type Reply = BoundaryReply;

    fn summary(&self) -> String {
        format!(
            "buffer [{}] current {} lookahead {}",
            page_list(&self.buffer),
            self.current.index,
            self.lookahead
                .as_ref()
                .map_or("none".to_string(), |p| p.index.to_string())
        )
    }
}

// chunk construction

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildChunk {
    pub pages: Vec<PageView>,
    pub lookahead: Option<PageView>,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complaint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildReply {
    pub description: String,
    pub entry_labels: Vec<String>,
    pub terminal_labels: Vec<String>,
    pub carry_pages: Vec<u32>,
    pub context: String,
}

impl OracleTask for BuildChunk {
    const TASK: Task = Task::BuildChunk;
    type Reply = BuildReply;

    fn check_reply(&self, reply: &BuildReply) -> Result<(), String> {
        if let Some(p) = reply
            .carry_pages
            .iter()
            .find(|p| !self.pages.iter().any(|b| b.index == **p))
        {
            return Err(format!("carry page {p} is not in the buffer"));
        }
        if reply.context.trim().is_empty() {
            return Err("updated context must be non-empty".into());
        }
        Ok(())
    }

    fn summary(&self) -> String {
        format!(
            "pages [{}]{}",
            page_list(&self.pages),
            if self.complaint.is_some() { " (re-request)" } else { "" }
        )
    }
}

// interface refinement

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineNodes {
    pub pages: Vec<PageView>,
    pub description: String,
    /// Labels without verbatim support in the pages.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineReply {
    pub supported: Vec<String>,
}

impl OracleTask for RefineNodes {
    const TASK: Task = Task::RefineNodes;
    type Reply = RefineReply;

    fn check_reply(&self, reply: &RefineReply) -> Result<(), String> {
        match reply.supported.iter().find(|l| !self.labels.contains(l)) {
            Some(l) => Err(format!("label {l:?} was not asked about")),
            None => Ok(()),
        }
    }

    fn summary(&self) -> String {
        format!("pages [{}] labels {:?}", page_list(&self.pages), self.labels)
    }
}

// duplicate verification

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindDuplicate {
    pub candidate: String,
    pub ancestors: Vec<LabeledEdge>,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuplicateReply {
    /// Indices into `candidates` judged equivalent to the candidate.
    pub matches: Vec<usize>,
}

impl OracleTask for FindDuplicate {
    const TASK: Task = Task::FindDuplicate;
    type Reply = DuplicateReply;

    fn check_reply(&self, reply: &DuplicateReply) -> Result<(), String> {
        match reply.matches.iter().find(|&&i| i >= self.candidates.len()) {
            Some(i) => Err(format!(
                "match index {i} out of range for {} candidates",
                self.candidates.len()
            )),
            None => Ok(()),
        }
    }

    fn summary(&self) -> String {
        format!("{:?} vs {:?}", self.candidate, self.candidates)
    }
}

// successor generation

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateChildren {
    pub node: String,
    pub incoming: Option<LabeledEdge>,
    pub context: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildrenReply {
    pub children: Vec<LabeledEdge>,
}

impl OracleTask for GenerateChildren {
    const TASK: Task = Task::GenerateChildren;
    type Reply = ChildrenReply;

    fn summary(&self) -> String {
        format!("children of {:?}", self.node)
    }
}

fn strict<T: DeserializeOwned>(value: &Value) -> Result<(), String> {
    serde_json::from_value::<T>(value.clone())
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Checks that a raw payload has the shape its task expects.
pub fn check_payload(task: Task, payload: &Value) -> Result<(), String> {
    match task {
        Task::ExtractProfile => strict::<ExtractProfile>(payload),
        Task::ClassifyPage => strict::<ClassifyPage>(payload),
        Task::PredictBoundary => strict::<PredictBoundary>(payload),
        Task::BuildChunk => strict::<BuildChunk>(payload),
        Task::RefineNodes => strict::<RefineNodes>(payload),
        Task::FindDuplicate => strict::<FindDuplicate>(payload),
        Task::GenerateChildren => strict::<GenerateChildren>(payload),
    }
}

/// Checks a reply body against its task's schema.
pub fn check_reply(task: Task, body: &Value) -> Result<(), String> {
    match task {
        Task::ExtractProfile => strict::<ProfileReply>(body),
        Task::ClassifyPage => strict::<ClassifyReply>(body),
        Task::PredictBoundary => strict::<BoundaryReply>(body),
        Task::BuildChunk => strict::<BuildReply>(body),
        Task::RefineNodes => strict::<RefineReply>(body),
        Task::FindDuplicate => strict::<DuplicateReply>(body),
        Task::GenerateChildren => strict::<ChildrenReply>(body),
    }
}

/// Short description of the reply shape, sent to live backends.
pub fn reply_shape(task: Task) -> &'static str {
    match task {
        Task::ExtractProfile => r#"{"metadata": {"<key>": "<value>"}, "scope_context": "<text>"}"#,
        Task::ClassifyPage => r#"{"label": "core" | "auxiliary"}"#,
        Task::PredictBoundary => r#"{"cut": true | false}"#,
        Task::BuildChunk => {
            r#"{"description": "<text>", "entry_labels": ["<label>"], "terminal_labels": ["<label>"], "carry_pages": [<page index>], "context": "<updated running context>"}"#
        }
        Task::RefineNodes => r#"{"supported": ["<label from labels>"]}"#,
        Task::FindDuplicate => r#"{"matches": [<index into candidates>]}"#,
        Task::GenerateChildren => r#"{"children": [{"label": "<successor>", "condition": "<transition condition>"}]}"#,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strict_reply_decoding() {
        assert!(check_reply(Task::ClassifyPage, &json!({"label": "core"})).is_ok());
        assert!(check_reply(Task::ClassifyPage, &json!({"label": "Core"})).is_err());
        assert!(check_reply(Task::ClassifyPage, &json!({"lable": "core"})).is_err());
        assert!(check_reply(Task::ClassifyPage, &json!({"label": "core", "why": "x"})).is_err());
        assert!(check_reply(Task::PredictBoundary, &json!({"cut": "yes"})).is_err());
        assert!(check_reply(Task::FindDuplicate, &json!({"matches": [-1]})).is_err());
    }

    #[test]
    fn semantic_checks() {
        let q = FindDuplicate {
            candidate: "a".into(),
            ancestors: vec![],
            candidates: vec!["b".into()],
        };
        assert!(q.check_reply(&DuplicateReply { matches: vec![0] }).is_ok());
        assert!(q.check_reply(&DuplicateReply { matches: vec![1] }).is_err());

        let b = BuildChunk {
            pages: vec![PageView { index: 2, text: "x".into(), image_ref: None }],
            lookahead: None,
            context: "c".into(),
            complaint: None,
        };
        let mut reply = BuildReply {
            description: "d".into(),
            entry_labels: vec!["a".into()],
            terminal_labels: vec!["b".into()],
            carry_pages: vec![2],
            context: "c2".into(),
        };
        assert!(b.check_reply(&reply).is_ok());
        reply.carry_pages = vec![3];
        assert!(b.check_reply(&reply).is_err());
    }

    #[test]
    fn payload_shapes() {
        let payload = serde_json::to_value(GenerateChildren {
            node: "n".into(),
            incoming: None,
            context: "t".into(),
        })
        .unwrap();
        assert!(check_payload(Task::GenerateChildren, &payload).is_ok());
        assert!(check_payload(Task::FindDuplicate, &payload).is_err());
    }
}
