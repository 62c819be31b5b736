use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::oracle::assess_raster;
use crate::imagery::decode_image_payload;
use crate::model::serialize_assessment;
use crate::prompting::{ChatMessage, ContentPart, PromptBundle, Role};

pub const DEFAULT_CREDENTIAL_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Replay,
    Mock,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Remote => "remote",
            Self::Replay => "replay",
            Self::Mock => "mock",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(Self::Remote),
            "replay" => Ok(Self::Replay),
            "mock" => Ok(Self::Mock),
            other => Err(format!(
                "unknown backend {other:?} (expected remote, replay or mock)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{message}")]
    Transient {
        message: String,
        retry_after: Option<Duration>,
    },
    #[error("{0}")]
    Fatal(String),
    #[error("no replay fixture for bundle {0}")]
    ReplayMiss(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions endpoint for the remote backend.
    pub endpoint: String,
    pub model_id: String,
    /// Environment variable holding the bearer token.
    pub credential_env: String,
    pub parallelism: usize,
    pub fixtures_dir: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_id: "gpt-4o".into(),
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            parallelism: 4,
            fixtures_dir: None,
            timeout_secs: 120,
        }
    }
}

pub trait ModelBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    /// Raw text of the model's reply.
    fn complete(
        &self,
        bundle: &PromptBundle,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError>;
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn ModelBackend>, BackendError> {
    Ok(match cfg.kind {
        BackendKind::Mock => Box::new(MockBackend),
        BackendKind::Replay => {
            let dir = cfg.fixtures_dir.clone().ok_or_else(|| {
                BackendError::Fatal("replay backend needs a fixtures directory".into())
            })?;
            Box::new(ReplayBackend::new(dir))
        }
        BackendKind::Remote => Box::new(RemoteBackend::from_env(cfg)?),
    })
}

/// Deterministic stand-in that reads the tile image with the pixel oracle.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl ModelBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(
        &self,
        _bundle: &PromptBundle,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        let (_, data) = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .and_then(|m| m.last_image())
            .ok_or_else(|| BackendError::Fatal("request carries no image".into()))?;
        let raster = decode_image_payload(data).map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(serialize_assessment(&assess_raster(&raster)))
    }
}

/// Serves recorded responses from `<dir>/<bundle_hash>.txt`.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn fixture_path(&self, bundle_hash: &str) -> PathBuf {
        self.dir.join(format!("{bundle_hash}.txt"))
    }
}

impl ModelBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        _messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        match std::fs::read_to_string(self.fixture_path(&bundle.bundle_hash)) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(BackendError::ReplayMiss(bundle.bundle_hash.clone()))
            }
            Err(e) => Err(BackendError::Fatal(e.to_string())),
        }
    }
}

/// OpenAI-style chat-completions client.
pub struct RemoteBackend {
    endpoint: String,
    model_id: String,
    api_key: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, model_id: &str, api_key: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model_id: model_id.to_string(),
            api_key: api_key.to_string(),
            agent,
        }
    }

    pub fn from_env(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&cfg.credential_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::Fatal(format!("{} is not set", cfg.credential_env)))?;
        Ok(Self::new(
            &cfg.endpoint,
            &cfg.model_id,
            &key,
            Duration::from_secs(cfg.timeout_secs),
        ))
    }

    pub fn request_body(&self, bundle: &PromptBundle, messages: &[ChatMessage]) -> Value {
        let messages: Vec<Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                let content: Vec<Value> = m
                    .content
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text { text } => json!({"type": "text", "text": text}),
                        ContentPart::Image { media_type, data } => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{media_type};base64,{data}")}
                        }),
                    })
                    .collect();
                json!({"role": role, "content": content})
            })
            .collect();
        json!({
            "model": self.model_id,
            "temperature": bundle.temperature,
            "messages": messages,
        })
    }
}

/// Pulls the assistant text out of a chat-completions body. Anything that
/// does not look like one is returned unchanged so the parser can judge it.
pub(crate) fn extract_reply(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.to_string())
}

impl ModelBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        let body = self.request_body(bundle, messages);
        let result = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => {
                return Err(BackendError::Transient {
                    message: e.to_string(),
                    retry_after: None,
                })
            }
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => {
                let text =
                    resp.body_mut()
                        .read_to_string()
                        .map_err(|e| BackendError::Transient {
                            message: e.to_string(),
                            retry_after: None,
                        })?;
                Ok(extract_reply(&text))
            }
            429 | 500..=599 => Err(BackendError::Transient {
                message: format!("HTTP {status}"),
                retry_after: crate::imagery::fetch::retry_after_header(&resp),
            }),
            _ => Err(BackendError::Fatal(format!("HTTP {status}"))),
        }
    }
}
