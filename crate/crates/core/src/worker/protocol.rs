//! Message types of the `jchat-worker/1` line protocol.
//!
//! A worker writes a hello line on startup, then answers one JSON response
//! line per JSON request line. Audio is always passed by path.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::DiarizationTurn;

pub const PROTOCOL: &str = "jchat-worker/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lid,
    Diarize,
    Enhance,
    Features,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Lid, Task::Diarize, Task::Enhance, Task::Features];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Lid => "lid",
            Task::Diarize => "diarize",
            Task::Enhance => "enhance",
            Task::Features => "features",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: String,
    pub tasks: Vec<Task>,
}

impl Hello {
    pub fn new(tasks: Vec<Task>) -> Self {
        Self {
            protocol: PROTOCOL.to_string(),
            tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub request_id: String,
    pub task: Task,
    pub audio_path: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl WorkerRequest {
    pub fn new(request_id: impl Into<String>, task: Task, audio_path: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            task,
            audio_path: audio_path.into(),
            params: Map::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn lid(id: impl Into<String>, audio: impl Into<String>, target_language: &str, window_s: f64) -> Self {
        Self::new(id, Task::Lid, audio)
            .param("target_language", target_language)
            .param("window_s", window_s)
    }

    pub fn diarize(id: impl Into<String>, audio: impl Into<String>) -> Self {
        Self::new(id, Task::Diarize, audio)
    }

    /// Enhance `[start_s, end_s)` of the audio into `output_path`.
    pub fn enhance(
        id: impl Into<String>,
        audio: impl Into<String>,
        start_s: f64,
        end_s: f64,
        output_path: &str,
    ) -> Self {
        Self::new(id, Task::Enhance, audio)
            .param("start_s", start_s)
            .param("end_s", end_s)
            .param("output_path", output_path)
    }

    /// Frame features of `[start_s, end_s)` written to `output_path`.
    pub fn features(
        id: impl Into<String>,
        audio: impl Into<String>,
        start_s: f64,
        end_s: f64,
        output_path: &str,
    ) -> Self {
        Self::new(id, Task::Features, audio)
            .param("start_s", start_s)
            .param("end_s", end_s)
            .param("output_path", output_path)
    }

    pub fn f64_param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Worker(format!("request {}: missing numeric param `{key}`", self.request_id)))
    }

    pub fn str_param(&self, key: &str) -> Result<&str> {
        self.params
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Worker(format!("request {}: missing string param `{key}`", self.request_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

/// Failure classes. Only `task` failures come from the worker itself; the
/// others are raised by the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Task,
    WorkerDied,
    Timeout,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub request_id: String,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
}

impl WorkerResponse {
    pub fn ok(request_id: impl Into<String>, payload: &impl Serialize) -> Self {
        Self {
            request_id: request_id.into(),
            status: ResponseStatus::Ok,
            payload: Some(serde_json::to_value(payload).expect("payload serializes")),
            error_message: None,
            error_kind: None,
        }
    }

    pub fn error(request_id: impl Into<String>, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            status: ResponseStatus::Error,
            payload: None,
            error_message: Some(message.into()),
            error_kind: Some(kind),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }

    pub fn kind(&self) -> Option<ErrorKind> {
        match self.status {
            ResponseStatus::Ok => None,
            ResponseStatus::Error => Some(self.error_kind.unwrap_or(ErrorKind::Task)),
        }
    }

    /// Decodes the payload, turning error responses into `Error::Worker`.
    pub fn into_payload<T: DeserializeOwned>(self) -> Result<T> {
        match self.status {
            ResponseStatus::Error => Err(Error::Worker(format!(
                "request {} failed ({:?}): {}",
                self.request_id,
                self.kind().unwrap_or(ErrorKind::Task),
                self.error_message.unwrap_or_default()
            ))),
            ResponseStatus::Ok => {
                let payload = self.payload.ok_or_else(|| {
                    Error::Worker(format!("request {}: ok response without payload", self.request_id))
                })?;
                serde_json::from_value(payload).map_err(|e| {
                    Error::Worker(format!("request {}: payload shape: {e}", self.request_id))
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidPayload {
    pub probabilities: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizePayload {
    pub turns: Vec<DiarizationTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancePayload {
    pub output_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesPayload {
    pub matrix_path: String,
    pub frames: usize,
    pub dim: usize,
}

/// Checks that an ok response's payload has the shape its task requires.
pub fn check_payload(task: Task, response: &WorkerResponse) -> Result<()> {
    if !response.is_ok() {
        return Ok(());
    }
    let r = response.clone();
    match task {
        Task::Lid => r.into_payload::<LidPayload>().map(drop),
        Task::Diarize => r.into_payload::<DiarizePayload>().map(drop),
        Task::Enhance => r.into_payload::<EnhancePayload>().map(drop),
        Task::Features => r.into_payload::<FeaturesPayload>().map(drop),
    }
}

/// Serializes a message as one `\n`-terminated line.
pub fn to_line(msg: &impl Serialize) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages serialize");
    s.push('\n');
    s
}

/// Something that can answer worker requests: a subprocess pool or an
/// in-process mock.
pub trait InferenceBackend: Send + Sync {
    fn call(&self, request: WorkerRequest) -> WorkerResponse;
}
