//! Fixture-driven backend for deterministic offline runs, and a recorder
//! that captures any backend's replies as fixtures.
//!
//! Fixture directory layout: one `<task>.json` file per task,
//!
//! ```json
//! {
//!   "format": "guidegraph.fixtures",
//!   "version": 1,
//!   "task": "classify_page",
//!   "entries": [
//!     { "key_digest": "<sha256>", "payload_summary": "page 2: ...", "response_body": { "label": "core" } }
//!   ]
//! }
//! ```
//!
//! Entries are keyed by [`payload_digest`], so replay does not depend on
//! call order. A `response_body` that is a JSON string is replayed verbatim
//! as raw text (used to script malformed replies); any other value is
//! replayed as its JSON encoding.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, OracleError, Result};
use crate::retrieval::HashingEmbedder;

use super::{payload_digest, tasks, Backend, OracleRequest, Task};

pub const FIXTURE_FORMAT: &str = "guidegraph.fixtures";
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub key_digest: String,
    pub payload_summary: String,
    pub response_body: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    format: String,
    version: u32,
    task: Task,
    entries: Vec<FixtureEntry>,
}

/// Immutable set of recorded replies.
#[derive(Debug, Clone, Default)]
pub struct FixtureSet {
    entries: BTreeMap<(Task, String), FixtureEntry>,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: Task, entry: FixtureEntry) {
        self.entries.insert((task, entry.key_digest.clone()), entry);
    }

    /// Adds a reply for a typed payload.
    pub fn insert_reply<T: tasks::OracleTask>(&mut self, payload: &T, reply: Value) {
        let value = serde_json::to_value(payload).expect("payload types always encode");
        self.insert(
            T::TASK,
            FixtureEntry {
                key_digest: payload_digest(T::TASK, &value),
                payload_summary: payload.summary(),
                response_body: reply,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, task: Task, digest: &str) -> Option<&FixtureEntry> {
        self.entries.get(&(task, digest.to_string()))
    }

    /// Loads every `<task>.json` in `dir`. Missing task files are fine.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("fixture directory {} does not exist", dir.display())));
        }
        let mut set = Self::new();
        for task in Task::ALL {
            let path = dir.join(format!("{}.json", task.as_str()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: FixtureFile = serde_json::from_str(&text).map_err(|e| Error::Artifact {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if file.format != FIXTURE_FORMAT || file.version != FIXTURE_VERSION || file.task != task {
                return Err(Error::Artifact {
                    path,
                    reason: format!(
                        "expected {FIXTURE_FORMAT}/{FIXTURE_VERSION} for task {task}, found {}/{} for {}",
                        file.format, file.version, file.task
                    ),
                });
            }
            for entry in file.entries {
                set.insert(task, entry);
            }
        }
        Ok(set)
    }

    /// Writes one file per task that has entries, sorted by digest.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for task in Task::ALL {
            let entries: Vec<FixtureEntry> = self
                .entries
                .iter()
                .filter(|((t, _), _)| *t == task)
                .map(|(_, e)| e.clone())
                .collect();
            if entries.is_empty() {
                continue;
            }
            let file = FixtureFile {
                format: FIXTURE_FORMAT.into(),
                version: FIXTURE_VERSION,
                task,
                entries,
            };
            let path = dir.join(format!("{}.json", task.as_str()));
            let mut text = serde_json::to_string_pretty(&file)?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Replays fixtures; embeds with seeded feature hashing.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    fixtures: Arc<FixtureSet>,
    embedder: HashingEmbedder,
}

impl ScriptedBackend {
    pub fn new(fixtures: FixtureSet) -> Self {
        Self {
            fixtures: Arc::new(fixtures),
            embedder: HashingEmbedder::default(),
        }
    }

    pub fn empty() -> Self {
        Self::new(FixtureSet::new())
    }

    pub fn with_embedder(mut self, embedder: HashingEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn fixtures(&self) -> &FixtureSet {
        &self.fixtures
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:hash-{}-{}", self.embedder.seed, self.embedder.dim)
    }

    fn complete(&self, request: &OracleRequest, _feedback: &[String]) -> Result<String, OracleError> {
        let digest = request.digest();
        match self.fixtures.get(request.task, &digest) {
            Some(entry) => Ok(match &entry.response_body {
                Value::String(raw) => raw.clone(),
                other => other.to_string(),
            }),
            None => Err(OracleError::protocol(
                request.task.as_str(),
                format!("no fixture for key {digest}"),
            )),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        Ok(self.embedder.embed(text))
    }
}

type Responder = dyn Fn(&OracleRequest, &[String]) -> Result<String, OracleError> + Send + Sync;

/// Answers requests with a closure; embeds with seeded feature hashing.
/// Handy for rule-based oracles and for authoring fixtures.
pub struct FnBackend {
    name: String,
    respond: Box<Responder>,
    embedder: HashingEmbedder,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        respond: impl Fn(&OracleRequest, &[String]) -> Result<String, OracleError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            respond: Box::new(respond),
            embedder: HashingEmbedder::default(),
        }
    }

    pub fn with_embedder(mut self, embedder: HashingEmbedder) -> Self {
        self.embedder = embedder;
        self
    }
}

impl Backend for FnBackend {
    fn id(&self) -> String {
        // Same embedding space as a scripted backend with the same hashing.
        format!("scripted:hash-{}-{}", self.embedder.seed, self.embedder.dim)
    }

    fn complete(&self, request: &OracleRequest, feedback: &[String]) -> Result<String, OracleError> {
        log::trace!("{} answering {}", self.name, request.request_id);
        (self.respond)(request, feedback)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        Ok(self.embedder.embed(text))
    }
}

/// Wraps a backend and records every reply it produces as a fixture.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    recorded: Mutex<FixtureSet>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            recorded: Mutex::new(FixtureSet::new()),
        }
    }

    pub fn fixtures(&self) -> FixtureSet {
        self.recorded.lock().expect("recorder lock").clone()
    }
}

fn summarize(task: Task, payload: &Value) -> String {
    use tasks::OracleTask;
    fn typed<T: OracleTask + serde::de::DeserializeOwned>(payload: &Value) -> String {
        serde_json::from_value::<T>(payload.clone())
            .map(|p| p.summary())
            .unwrap_or_else(|_| "unparsed payload".into())
    }
    match task {
        Task::ExtractProfile => typed::<tasks::ExtractProfile>(payload),
        Task::ClassifyPage => typed::<tasks::ClassifyPage>(payload),
        Task::PredictBoundary => typed::<tasks::PredictBoundary>(payload),
        Task::BuildChunk => typed::<tasks::BuildChunk>(payload),
        Task::RefineNodes => typed::<tasks::RefineNodes>(payload),
        Task::FindDuplicate => typed::<tasks::FindDuplicate>(payload),
        Task::GenerateChildren => typed::<tasks::GenerateChildren>(payload),
    }
}

impl Backend for RecordingBackend {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &OracleRequest, feedback: &[String]) -> Result<String, OracleError> {
        let raw = self.inner.complete(request, feedback)?;
        let body = serde_json::from_str::<Value>(&raw).unwrap_or_else(|_| Value::String(raw.clone()));
        self.recorded.lock().expect("recorder lock").insert(
            request.task,
            FixtureEntry {
                key_digest: request.digest(),
                payload_summary: summarize(request.task, &request.payload),
                response_body: body,
            },
        );
        Ok(raw)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.inner.embed(text)
    }
}
