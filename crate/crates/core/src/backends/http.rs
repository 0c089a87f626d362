//! OpenAI-compatible chat-completions client.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, Dialer};
use crate::history::ExchangePair;

pub(crate) const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub(crate) const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Request body sent to the chat endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatPayload {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

/// System prompt, then each history pair as a user/assistant turn in sequence
/// order, then the incoming message as the final user turn.
pub fn build_chat_payload(
    prompt: Option<&str>,
    history: &[ExchangePair],
    message: &str,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2 * history.len() + 2);
    if let Some(p) = prompt {
        messages.push(ChatMessage::new(Role::System, p));
    }
    for pair in history {
        messages.push(ChatMessage::new(Role::User, pair.input.as_str()));
        messages.push(ChatMessage::new(Role::Assistant, pair.output.as_str()));
    }
    messages.push(ChatMessage::new(Role::User, message));
    messages
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Sends one JSON POST. Implementations must not retry; [`HttpChatDialer`] does.
pub trait ChatTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UreqTransport;

impl ChatTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(TransportResponse { status, body })
    }
}

/// Retries on transport failures, 429 and 5xx with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpChatSettings {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
}

pub struct HttpChatDialer {
    settings: HttpChatSettings,
    prompt: Option<String>,
    transport: Arc<dyn ChatTransport>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for HttpChatDialer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatDialer")
            .field("settings", &self.settings)
            .field("has_prompt", &self.prompt.is_some())
            .finish_non_exhaustive()
    }
}

impl HttpChatDialer {
    pub fn new(
        settings: HttpChatSettings,
        prompt: Option<String>,
        transport: Arc<dyn ChatTransport>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            settings,
            prompt,
            transport,
            retry,
        }
    }

    pub fn payload(&self, message: &str, history: &[ExchangePair]) -> ChatPayload {
        ChatPayload {
            model: self.settings.model.clone(),
            temperature: self.settings.temperature,
            messages: build_chat_payload(self.prompt.as_deref(), history, message),
        }
    }

    fn error(&self, status: Option<u16>, message: impl Into<String>) -> BackendError {
        BackendError::Http {
            endpoint: self.settings.endpoint.clone(),
            status,
            message: message.into(),
        }
    }

    fn send(&self, body: &str) -> Result<String, BackendError> {
        let key =
            match &self.settings.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    self.error(None, format!("environment variable {var} is not set"))
                })?),
                None => None,
            };
        let mut attempt = 0;
        loop {
            let outcome = self.transport.post_json(
                &self.settings.endpoint,
                key.as_deref(),
                body,
                self.settings.timeout,
            );
            let (transient, err) = match outcome {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) => (
                    r.status == 429 || r.status >= 500,
                    self.error(
                        Some(r.status),
                        format!("status {}: {}", r.status, snippet(&r.body)),
                    ),
                ),
                Err(e) => (true, self.error(None, e.0)),
            };
            if !transient || attempt >= self.retry.max_retries {
                return Err(err);
            }
            log::warn!("chat request failed ({err}); retrying");
            thread::sleep(self.retry.delay(attempt));
            attempt += 1;
        }
    }
}

fn snippet(body: &str) -> &str {
    match body.char_indices().nth(200) {
        Some((i, _)) => &body[..i],
        None => body,
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl Dialer for HttpChatDialer {
    fn predict(&mut self, message: &str, history: &[ExchangePair]) -> Result<String, BackendError> {
        let body = serde_json::to_string(&self.payload(message, history))
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let raw = self.send(&body)?;
        let parsed: CompletionResponse = serde_json::from_str(&raw)
            .map_err(|e| self.error(Some(200), format!("malformed completion: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if content.is_empty() {
            return Err(BackendError::EmptyCompletion(self.settings.model.clone()));
        }
        Ok(content)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;

    fn pair(seq: u64, i: &str, o: &str) -> ExchangePair {
        ExchangePair {
            seq,
            origin: "l".into(),
            input: i.into(),
            output: o.into(),
        }
    }

    struct Canned {
        replies: Mutex<Vec<Result<TransportResponse, TransportError>>>,
        bodies: Mutex<Vec<String>>,
    }

    impl Canned {
        fn new(mut replies: Vec<Result<TransportResponse, TransportError>>) -> Arc<Self> {
            replies.reverse();
            Arc::new(Self {
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            })
        }
    }

    impl ChatTransport for Canned {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &str,
            _timeout: Duration,
        ) -> Result<TransportResponse, TransportError> {
            self.bodies.lock().unwrap().push(body.to_owned());
            self.replies.lock().unwrap().pop().expect("unexpected call")
        }
    }

    fn ok(content: &str) -> Result<TransportResponse, TransportError> {
        Ok(TransportResponse {
            status: 200,
            body: serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
                .to_string(),
        })
    }

    fn status(code: u16) -> Result<TransportResponse, TransportError> {
        Ok(TransportResponse {
            status: code,
            body: "nope".into(),
        })
    }

    fn dialer(t: Arc<Canned>) -> HttpChatDialer {
        HttpChatDialer::new(
            HttpChatSettings {
                endpoint: "http://llm.test/v1/chat/completions".into(),
                model: "m".into(),
                temperature: 0.1,
                api_key_env: None,
                timeout: DEFAULT_TIMEOUT,
            },
            Some("P".into()),
            t,
            RetryPolicy {
                max_retries: 2,
                base_delay: Duration::from_millis(1),
            },
        )
    }

    #[test]
    fn payload_construction() {
        let m = build_chat_payload(Some("P"), &[], "hi");
        assert_eq!(
            m,
            vec![
                ChatMessage::new(Role::System, "P"),
                ChatMessage::new(Role::User, "hi")
            ]
        );
        let m = build_chat_payload(Some("P"), &[pair(1, "a", "b")], "c");
        let roles: Vec<Role> = m.iter().map(|x| x.role).collect();
        assert_eq!(
            roles,
            [Role::System, Role::User, Role::Assistant, Role::User]
        );
        assert_eq!(build_chat_payload(None, &[pair(1, "a", "b")], "c").len(), 3);
    }

    #[test]
    fn successful_completion_and_wire_shape() {
        let t = Canned::new(vec![ok("Hello! How are you today?")]);
        let mut d = dialer(t.clone());
        assert_eq!(
            d.predict("hello", &[]).unwrap(),
            "Hello! How are you today?"
        );
        let sent: serde_json::Value = serde_json::from_str(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["temperature"], 0.1);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "hello");
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let t = Canned::new(vec![
            status(503),
            Err(TransportError("reset".into())),
            ok("fine"),
        ]);
        let mut d = dialer(t.clone());
        assert_eq!(d.predict("x", &[]).unwrap(), "fine");
        assert_eq!(t.bodies.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_two_retries() {
        let t = Canned::new(vec![status(500), status(502), status(503)]);
        let err = dialer(t.clone()).predict("x", &[]).unwrap_err();
        assert!(
            matches!(err, BackendError::Http { status: Some(503), ref endpoint, .. } if endpoint.contains("llm.test"))
        );
        assert_eq!(t.bodies.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Canned::new(vec![status(401)]);
        assert!(matches!(
            dialer(t.clone()).predict("x", &[]),
            Err(BackendError::Http {
                status: Some(401),
                ..
            })
        ));
        assert_eq!(t.bodies.lock().unwrap().len(), 1);
    }

    #[test]
    fn empty_completion_rejected() {
        let t = Canned::new(vec![ok("")]);
        assert!(matches!(
            dialer(t).predict("x", &[]),
            Err(BackendError::EmptyCompletion(_))
        ));
    }

    #[test]
    fn missing_api_key_variable() {
        let t = Canned::new(vec![]);
        let mut d = dialer(t);
        d.settings.api_key_env = Some("MFA_TEST_SURELY_UNSET_KEY".into());
        assert!(matches!(
            d.predict("x", &[]),
            Err(BackendError::Http { status: None, .. })
        ));
    }

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy::default();
        assert_eq!(r.delay(0), Duration::from_millis(500));
        assert_eq!(r.delay(1), Duration::from_millis(1000));
    }
}
