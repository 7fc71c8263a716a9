//! Uniform access to every prompted model judgment.
//!
//! An [`Oracle`] wraps a [`Backend`] with payload validation, strict reply
//! decoding, bounded retries that feed the validation error back to the
//! backend, and an append-only audit log with one record per dispatch.

pub mod live;
pub mod scripted;
pub mod tasks;

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::OracleError;

pub use live::{LiveBackend, LiveSettings};
pub use scripted::{FixtureEntry, FixtureSet, FnBackend, RecordingBackend, ScriptedBackend};
pub use tasks::OracleTask;

pub const DEFAULT_RETRY_LIMIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ExtractProfile,
    ClassifyPage,
    PredictBoundary,
    BuildChunk,
    RefineNodes,
    FindDuplicate,
    GenerateChildren,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::ExtractProfile,
        Task::ClassifyPage,
        Task::PredictBoundary,
        Task::BuildChunk,
        Task::RefineNodes,
        Task::FindDuplicate,
        Task::GenerateChildren,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ExtractProfile => "extract_profile",
            Task::ClassifyPage => "classify_page",
            Task::PredictBoundary => "predict_boundary",
            Task::BuildChunk => "build_chunk",
            Task::RefineNodes => "refine_nodes",
            Task::FindDuplicate => "find_duplicate",
            Task::GenerateChildren => "generate_children",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub task: Task,
    pub payload: Value,
    pub request_id: String,
}

impl OracleRequest {
    pub fn digest(&self) -> String {
        payload_digest(self.task, &self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub request_id: String,
    pub body: Value,
    /// Verbatim backend output of the accepted attempt.
    pub raw: String,
}

/// Content key of a request: SHA-256 over the task name and the canonical
/// (sorted-key, compact) JSON encoding of the payload.
pub fn payload_digest(task: Task, payload: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(task.as_str().as_bytes());
    hasher.update(b"\n");
    hasher.update(canonical_json(payload).as_bytes());
    hex::encode(hasher.finalize())
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn sorted(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&map[k]))).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(value)).expect("json values always encode")
}

/// A model endpoint able to answer oracle requests and embed labels.
pub trait Backend: Send + Sync {
    /// Stable identifier, used to key persisted embedding caches.
    fn id(&self) -> String;

    /// Raw reply text for `request`. `feedback` lists validation errors of
    /// earlier attempts for the same request, oldest first.
    fn complete(&self, request: &OracleRequest, feedback: &[String]) -> Result<String, OracleError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub request_id: String,
    pub task: Task,
    pub payload_digest: String,
    pub attempts: usize,
    pub outcome: String,
}

/// Append-only audit sink, in memory and optionally mirrored to a
/// line-delimited JSON file.
#[derive(Debug, Default)]
pub struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    file: Option<Mutex<File>>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    fn append(&self, record: AuditRecord) {
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&record).expect("audit records encode");
            let mut file = file.lock().expect("audit file lock");
            if let Err(e) = writeln!(file, "{line}") {
                log::error!("failed to append audit record: {e}");
            }
        }
        self.records.lock().expect("audit lock").push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().expect("audit lock").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("audit lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Oracle {
    backend: Arc<dyn Backend>,
    retry_limit: usize,
    audit: AuditLog,
    counter: AtomicU64,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("backend", &self.backend.id())
            .field("retry_limit", &self.retry_limit)
            .finish()
    }
}

impl Oracle {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry_limit: DEFAULT_RETRY_LIMIT,
            audit: AuditLog::in_memory(),
            counter: AtomicU64::new(0),
        }
    }

    /// Total number of attempts per dispatch (at least one).
    pub fn with_retry_limit(mut self, attempts: usize) -> Self {
        self.retry_limit = attempts.max(1);
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = audit;
        self
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn request(&self, task: Task, payload: Value) -> OracleRequest {
        let seq = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        OracleRequest {
            task,
            payload,
            request_id: format!("{}-{seq:06}", task.as_str()),
        }
    }

    pub fn dispatch(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        self.dispatch_checked(request, &|_| Ok(()))
    }

    /// Like [`dispatch`](Self::dispatch), with an extra semantic check that
    /// participates in the retry loop.
    pub fn dispatch_checked(
        &self,
        request: &OracleRequest,
        check: &dyn Fn(&Value) -> Result<(), String>,
    ) -> Result<OracleResponse, OracleError> {
        let digest = request.digest();
        let record = |attempts: usize, outcome: String| {
            self.audit.append(AuditRecord {
                timestamp: chrono::Utc::now().to_rfc3339(),
                request_id: request.request_id.clone(),
                task: request.task,
                payload_digest: digest.clone(),
                attempts,
                outcome,
            })
        };

        if let Err(reason) = tasks::check_payload(request.task, &request.payload) {
            let err = OracleError::protocol(request.task.as_str(), format!("invalid payload: {reason}"));
            record(0, err.to_string());
            return Err(err);
        }

        let mut feedback: Vec<String> = Vec::new();
        for attempt in 1..=self.retry_limit {
            let raw = match self.backend.complete(request, &feedback) {
                Ok(raw) => raw,
                Err(err) => {
                    record(attempt, err.to_string());
                    return Err(err);
                }
            };
            match decode(request.task, &raw).and_then(|body| check(&body).map(|_| body)) {
                Ok(body) => {
                    record(attempt, "ok".to_string());
                    return Ok(OracleResponse {
                        request_id: request.request_id.clone(),
                        body,
                        raw,
                    });
                }
                Err(reason) => {
                    log::debug!("{} attempt {attempt} rejected: {reason}", request.request_id);
                    feedback.push(reason);
                }
            }
        }
        let err = OracleError::protocol(
            request.task.as_str(),
            format!(
                "no valid reply after {} attempts; last error: {}",
                self.retry_limit,
                feedback.last().map(String::as_str).unwrap_or("none")
            ),
        );
        record(self.retry_limit, err.to_string());
        Err(err)
    }

    /// Typed call: encodes the payload, dispatches, and decodes the reply.
    pub fn ask<T: OracleTask>(&self, payload: &T) -> Result<T::Reply, OracleError> {
        let value = serde_json::to_value(payload).expect("payload types always encode");
        let request = self.request(T::TASK, value);
        let response = self.dispatch_checked(&request, &|body| {
            let reply: T::Reply = serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
            payload.check_reply(&reply)
        })?;
        Ok(serde_json::from_value(response.body).expect("validated in dispatch"))
    }
}

fn decode(task: Task, raw: &str) -> Result<Value, String> {
    let body: Value = serde_json::from_str(raw.trim()).map_err(|e| format!("reply is not JSON: {e}"))?;
    if !body.is_object() {
        return Err("reply is not a JSON object".into());
    }
    tasks::check_reply(task, &body).map_err(|e| format!("reply does not match the {task} schema: {e}"))?;
    Ok(body)
}
