//! Backend for OpenAI-compatible chat-completion and embedding endpoints.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::OracleError;

use super::{tasks, Backend, OracleRequest, Task};

pub const DEFAULT_TOKEN_ENV: &str = "GUIDEGRAPH_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveSettings {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// Defaults to `endpoint`.
    #[serde(default)]
    pub embedding_endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.into()
}

fn default_timeout() -> u64 {
    120
}

pub struct LiveBackend {
    settings: LiveSettings,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveBackend").field("settings", &self.settings).finish()
    }
}

fn instruction(task: Task) -> &'static str {
    match task {
        Task::ExtractProfile => {
            "You read the opening pages of a clinical guideline. Extract document metadata \
             (title, issuing body, version, date where present) and a one-paragraph statement \
             of the clinical scope the guideline covers."
        }
        Task::ClassifyPage => {
            "Decide whether this guideline page carries decision logic (recommendations, \
             algorithms, flowcharts, treatment tables) or is auxiliary (front matter, \
             references, acknowledgements, appendices without recommendations)."
        }
        Task::PredictBoundary => {
            "The buffer holds consecutive guideline pages forming one decision segment. Decide \
             whether a segment boundary falls after the current page, given the lookahead page, \
             the running context and the size budget in characters."
        }
        Task::BuildChunk => {
            "Summarize these guideline pages as one decision segment: a short description, the \
             entry conditions that start the segment, the terminal outcomes that end it, the \
             page indices whose content continues into the next segment, and an updated \
             running context."
        }
        Task::RefineNodes => {
            "Return the subset of the given labels that the pages actually support. Do not \
             invent or rephrase labels."
        }
        Task::FindDuplicate => {
            "Given a candidate decision step, its ancestors and a list of existing steps, return \
             the indices of existing steps that denote the same clinical state or action."
        }
        Task::GenerateChildren => {
            "List the immediate successor steps of this decision node in the guideline, each \
             with the condition under which the transition happens. Return an empty list if \
             the node has no successors."
        }
    }
}

fn image_part(reference: &str) -> Result<Value, OracleError> {
    let url = if reference.starts_with("http://")
        || reference.starts_with("https://")
        || reference.starts_with("data:")
    {
        reference.to_string()
    } else {
        let path = Path::new(reference);
        let bytes = std::fs::read(path)
            .map_err(|e| OracleError::Transport(format!("cannot read image {reference}: {e}")))?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(ext) if ext == "png" => "image/png",
            Some(ext) if ext == "jpg" || ext == "jpeg" => "image/jpeg",
            Some(ext) if ext == "gif" => "image/gif",
            Some(ext) if ext == "webp" => "image/webp",
            _ => "application/octet-stream",
        };
        format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        )
    };
    Ok(json!({"type": "image_url", "image_url": {"url": url}}))
}

fn collect_images(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (key, v) in map {
                match (key.as_str(), v) {
                    ("image_ref", Value::String(s)) => out.push(s.clone()),
                    _ => collect_images(v, out),
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|v| collect_images(v, out)),
        _ => {}
    }
}

impl LiveBackend {
    pub fn new(settings: LiveSettings) -> Result<Self, OracleError> {
        let token = std::env::var(&settings.token_env).ok().filter(|t| !t.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        Ok(Self { settings, token, client })
    }

    fn post(&self, base: &str, path: &str, body: &Value) -> Result<Value, OracleError> {
        let url = format!("{}/{path}", base.trim_end_matches('/'));
        let mut request = self.client.post(&url).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| OracleError::Transport(format!("POST {url}: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(OracleError::Transport(format!("POST {url}: HTTP {status}: {text}")));
        }
        response
            .json::<Value>()
            .map_err(|e| OracleError::Transport(format!("POST {url}: unreadable body: {e}")))
    }

    fn chat_body(&self, request: &OracleRequest, feedback: &[String]) -> Result<Value, OracleError> {
        let system = format!(
            "{}\nReply with a single JSON object of exactly this shape and no other keys:\n{}",
            instruction(request.task),
            tasks::reply_shape(request.task)
        );
        let mut images = Vec::new();
        collect_images(&request.payload, &mut images);
        let mut content = vec![json!({"type": "text", "text": request.payload.to_string()})];
        for reference in &images {
            content.push(image_part(reference)?);
        }
        let mut messages = vec![
            json!({"role": "system", "content": system}),
            json!({"role": "user", "content": content}),
        ];
        for reason in feedback {
            messages.push(json!({
                "role": "user",
                "content": format!("Your previous reply was rejected: {reason}. Reply again with valid JSON only."),
            }));
        }
        Ok(json!({
            "model": self.settings.chat_model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": messages,
        }))
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> String {
        format!("live:{}:{}", self.settings.endpoint, self.settings.embedding_model)
    }

    fn complete(&self, request: &OracleRequest, feedback: &[String]) -> Result<String, OracleError> {
        let body = self.chat_body(request, feedback)?;
        let reply = self.post(&self.settings.endpoint, "chat/completions", &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                OracleError::protocol(request.task.as_str(), "completion has no message content")
            })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        let base = self
            .settings
            .embedding_endpoint
            .as_deref()
            .unwrap_or(&self.settings.endpoint);
        let body = json!({"model": self.settings.embedding_model, "input": text});
        let reply = self.post(base, "embeddings", &body)?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| OracleError::protocol("embed", "response has no data[0].embedding"))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| OracleError::protocol("embed", "embedding holds a non-number"))
            })
            .collect()
    }
}
