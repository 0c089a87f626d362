//! State functions: everything a machine state can run to turn a message into a reply.
//!
//! All backends implement [`Dialer`]. Built-ins are a scripted mock, a
//! template echo, an OpenAI-compatible HTTP chat client and a CSV writer
//! module. Custom backends only need to implement the trait.

mod http;
mod writer;

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use self::http::{
    build_chat_payload, ChatMessage, ChatPayload, ChatTransport, HttpChatDialer, HttpChatSettings,
    RetryPolicy, Role, TransportError, TransportResponse, UreqTransport,
};
pub use self::writer::{WriterModule, SINK_HEADER};

use crate::history::ExchangePair;
use crate::model::{Params, StateKind, StateNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("SCRIPT_EXHAUSTED: scripted backend `{0}` has no lines left")]
    ScriptExhausted(String),
    #[error("HTTP_ERROR: {endpoint}: {message}")]
    Http {
        endpoint: String,
        status: Option<u16>,
        message: String,
    },
    #[error("EMPTY_COMPLETION: backend `{0}` returned an empty reply")]
    EmptyCompletion(String),
    #[error("SINK_IO: {path}: {message}")]
    SinkIo { path: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

/// The function of a machine state: reply to `message`, optionally using the
/// readable part of its shared history.
pub trait Dialer: Send {
    fn predict(&mut self, message: &str, history: &[ExchangePair]) -> Result<String, BackendError>;
}

/// Calls `dialer` and rejects empty replies.
pub fn predict(
    name: &str,
    dialer: &mut dyn Dialer,
    message: &str,
    history: &[ExchangePair],
) -> Result<String, BackendError> {
    let reply = dialer.predict(message, history)?;
    if reply.is_empty() {
        return Err(BackendError::EmptyCompletion(name.to_owned()));
    }
    Ok(reply)
}

/// Replays fixed lines in order, ignoring its input.
#[derive(Debug, Clone)]
pub struct ScriptedDialer {
    name: String,
    lines: VecDeque<String>,
}

impl ScriptedDialer {
    pub fn new<I, S>(name: impl Into<String>, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            name: name.into(),
            lines: lines.into_iter().map(Into::into).collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.lines.len()
    }
}

impl Dialer for ScriptedDialer {
    fn predict(
        &mut self,
        _message: &str,
        _history: &[ExchangePair],
    ) -> Result<String, BackendError> {
        self.lines
            .pop_front()
            .ok_or_else(|| BackendError::ScriptExhausted(self.name.clone()))
    }
}

/// Substitutes the incoming message for `{msg}` in a fixed pattern.
#[derive(Debug, Clone)]
pub struct TemplateDialer {
    pattern: String,
}

pub const TEMPLATE_PLACEHOLDER: &str = "{msg}";

impl TemplateDialer {
    /// The pattern must contain literal text so that the output is never empty.
    pub fn new(pattern: impl Into<String>) -> Result<Self, BackendError> {
        let pattern = pattern.into();
        if pattern.replace(TEMPLATE_PLACEHOLDER, "").is_empty() {
            return Err(BackendError::Config(
                "template pattern must contain literal text".into(),
            ));
        }
        Ok(Self { pattern })
    }
}

impl Dialer for TemplateDialer {
    fn predict(
        &mut self,
        message: &str,
        _history: &[ExchangePair],
    ) -> Result<String, BackendError> {
        Ok(self.pattern.replace(TEMPLATE_PLACEHOLDER, message))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Scripted,
    Template,
    HttpChat,
    Writer,
}

impl BackendKind {
    /// Determines which backend a machine state's parameters describe.
    pub fn resolve(state: &StateNode) -> Result<BackendKind, String> {
        match state.kind {
            StateKind::User => Err("user states have no backend".into()),
            StateKind::Writer => {
                let p = &state.params;
                if p.sink.as_deref().is_none_or(str::is_empty) {
                    return Err("writer needs a `sink` path".into());
                }
                if let Some(pat) = &p.pattern {
                    regex::Regex::new(pat)
                        .map_err(|e| format!("invalid extraction pattern: {e}"))?;
                }
                Ok(BackendKind::Writer)
            }
            StateKind::Dialer => {
                let kind = check_dialer_params(&state.params)?;
                if kind == BackendKind::Template {
                    let pat = state.params.pattern.as_deref().unwrap_or_default();
                    TemplateDialer::new(pat).map_err(|e| e.to_string())?;
                }
                Ok(kind)
            }
        }
    }
}

/// Checks parameters of anything that behaves like a dialer (dialer states
/// and LLM triggers) and returns the backend they select.
pub fn check_dialer_params(p: &Params) -> Result<BackendKind, String> {
    if let Some(t) = p.temperature {
        if !(0.0..=2.0).contains(&t) {
            return Err(format!("temperature {t} outside [0, 2]"));
        }
    }
    if let Some(t) = p.timeout {
        if !(t > 0.0 && t.is_finite()) {
            return Err(format!("timeout {t} must be positive"));
        }
    }
    if p.endpoint.is_some() || p.model.is_some() {
        if p.endpoint.as_deref().is_none_or(str::is_empty)
            || p.model.as_deref().is_none_or(str::is_empty)
        {
            return Err("HTTP chat backends need both `endpoint` and `model`".into());
        }
        return Ok(BackendKind::HttpChat);
    }
    if p.script.is_some() || p.script_file.is_some() {
        return Ok(BackendKind::Scripted);
    }
    if p.pattern.is_some() {
        return Ok(BackendKind::Template);
    }
    Err("no backend configured (need endpoint+model, script, script_file or pattern)".into())
}

/// Everything needed to instantiate backends for one session.
#[derive(Clone)]
pub struct BackendEnv {
    /// Resolves relative prompt and script paths.
    pub base_dir: Option<PathBuf>,
    /// Resolves relative writer sinks; falls back to `base_dir`.
    pub sink_dir: Option<PathBuf>,
    pub session_id: String,
    pub transport: Arc<dyn ChatTransport>,
    pub retry: RetryPolicy,
}

impl std::fmt::Debug for BackendEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendEnv")
            .field("base_dir", &self.base_dir)
            .field("sink_dir", &self.sink_dir)
            .field("session_id", &self.session_id)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Default for BackendEnv {
    fn default() -> Self {
        Self {
            base_dir: None,
            sink_dir: None,
            session_id: "session".into(),
            transport: Arc::new(UreqTransport),
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendEnv {
    pub fn resolve(&self, path: &str) -> PathBuf {
        resolve_in(self.base_dir.as_deref(), path)
    }

    pub fn resolve_sink(&self, path: &str) -> PathBuf {
        resolve_in(self.sink_dir.as_deref().or(self.base_dir.as_deref()), path)
    }

    /// Inline prompt, else the contents of `prompt_file`.
    pub fn load_prompt(&self, p: &Params) -> Result<Option<String>, BackendError> {
        if let Some(prompt) = &p.prompt {
            return Ok(Some(prompt.clone()));
        }
        match &p.prompt_file {
            Some(file) => {
                let path = self.resolve(file);
                fs::read_to_string(&path)
                    .map(|s| Some(s.trim_end().to_owned()))
                    .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
            }
            None => Ok(None),
        }
    }

    pub fn load_script(&self, p: &Params) -> Result<Vec<String>, BackendError> {
        if let Some(lines) = &p.script {
            return Ok(lines.clone());
        }
        let file = p
            .script_file
            .as_deref()
            .ok_or_else(|| BackendError::Config("no script configured".into()))?;
        let path = self.resolve(file);
        let text = fs::read_to_string(&path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect())
    }

    /// Instantiates a dialer-like backend from parameters (states or LLM triggers).
    pub fn build_dialer(
        &self,
        name: &str,
        p: &Params,
        default_temperature: f64,
    ) -> Result<Box<dyn Dialer>, BackendError> {
        match check_dialer_params(p).map_err(BackendError::Config)? {
            BackendKind::Scripted => Ok(Box::new(ScriptedDialer::new(name, self.load_script(p)?))),
            BackendKind::Template => Ok(Box::new(TemplateDialer::new(
                p.pattern.clone().unwrap_or_default(),
            )?)),
            BackendKind::HttpChat => {
                let settings = HttpChatSettings {
                    endpoint: p.endpoint.clone().unwrap_or_default(),
                    model: p.model.clone().unwrap_or_default(),
                    temperature: p.temperature.unwrap_or(default_temperature),
                    api_key_env: p.api_key_env.clone(),
                    timeout: p
                        .timeout
                        .map(Duration::from_secs_f64)
                        .unwrap_or(http::DEFAULT_TIMEOUT),
                };
                Ok(Box::new(HttpChatDialer::new(
                    settings,
                    self.load_prompt(p)?,
                    self.transport.clone(),
                    self.retry,
                )))
            }
            BackendKind::Writer => unreachable!("check_dialer_params never selects a writer"),
        }
    }

    /// Instantiates the backend of a machine state.
    pub fn build_state(&self, state: &StateNode) -> Result<Box<dyn Dialer>, BackendError> {
        match BackendKind::resolve(state).map_err(BackendError::Config)? {
            BackendKind::Writer => {
                let p = &state.params;
                let sink = self.resolve_sink(p.sink.as_deref().unwrap_or_default());
                let field = p.field.clone().unwrap_or_else(|| state.id.to_string());
                Ok(Box::new(WriterModule::new(
                    sink,
                    field,
                    p.pattern.as_deref(),
                    self.session_id.clone(),
                )?))
            }
            _ => self.build_dialer(state.id.as_str(), &state.params, http::DEFAULT_TEMPERATURE),
        }
    }
}

fn resolve_in(dir: Option<&Path>, path: &str) -> PathBuf {
    let p = Path::new(path);
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}
