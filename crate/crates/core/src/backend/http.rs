//! OpenAI-compatible chat-completions client: POSTs
//! `{base_url}/chat/completions` and reads `choices[0].message.content`.
//!
//! Transport failures are retried with bounded exponential backoff (three
//! attempts by default); non-2xx statuses fail immediately. A small
//! semaphore bounds in-flight requests per backend.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatMessage, DecodeParams, PromptBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub id: String,
    /// Endpoint root; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. Secrets
    /// never appear in config files or flags.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: String,
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut avail = self.available.lock().expect("gate lock");
        while *avail == 0 {
            avail = self.cv.wait(avail).expect("gate wait");
        }
        *avail -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.available.lock().expect("gate lock") += 1;
        self.gate.cv.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        let gate = Gate::new(config.max_in_flight);
        Ok(Self {
            config,
            api_key,
            agent: ureq::Agent::new_with_config(agent_config),
            gate,
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, bundle: &PromptBundle, params: &DecodeParams) -> Result<String, AttemptError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: &bundle.messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        let mut request = self.agent.post(self.endpoint());
        if let Some(key) = &self.api_key {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| AttemptError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(AttemptError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| AttemptError::Transport(format!("malformed response body: {e}")))?;
        Ok(parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .unwrap_or_default())
    }
}

enum AttemptError {
    /// Retryable: connection, timeout, or malformed-body failures.
    Transport(String),
    /// Permanent: the server answered with a non-2xx status.
    Status { status: u16, body: String },
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        let mut last_detail = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(bundle, params) {
                Ok(text) => {
                    if text.trim().is_empty() {
                        return Err(BackendError::EmptyCompletion);
                    }
                    return Ok(text);
                }
                Err(AttemptError::Status { status, body }) => {
                    return Err(BackendError::Status { status, body });
                }
                Err(AttemptError::Transport(detail)) => {
                    last_detail = detail;
                    if attempt < self.config.max_attempts {
                        let backoff = self.config.backoff_ms << (attempt - 1);
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts: self.config.max_attempts,
            detail: last_detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TaskDescriptor, TaskKind};
    use crate::domain::ItemId;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn bundle() -> PromptBundle {
        PromptBundle {
            messages: vec![ChatMessage::user("rank these")],
            descriptor: TaskDescriptor::new(TaskKind::Rank, vec![ItemId(1), ItemId(2)], None)
                .unwrap(),
        }
    }

    fn config(base_url: String) -> HttpBackendConfig {
        HttpBackendConfig {
            id: "test-http".into(),
            base_url,
            model: "test-model".into(),
            api_key_env: None,
            max_attempts: 3,
            backoff_ms: 1,
            max_in_flight: 4,
            timeout_secs: 5,
        }
    }

    /// Tiny one-shot HTTP server answering each connection with a fixed
    /// status and JSON body.
    fn serve_once(status: u16, body: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(rest) = lower.strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut payload = vec![0u8; content_length];
            reader.read_exact(&mut payload).unwrap();
            let reason = if status == 200 { "OK" } else { "ERR" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let mut stream = reader.into_inner();
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&payload).into_owned()
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn successful_completion_parses_content() {
        let reply = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "[2, 1]"}}]
        })
        .to_string();
        let (url, server) = serve_once(200, reply);
        let backend = HttpBackend::new(config(url)).unwrap();
        let text = backend.complete(&bundle(), &DecodeParams::default()).unwrap();
        assert_eq!(text, "[2, 1]");

        let request_body = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&request_body).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["role"], "user");
    }

    #[test]
    fn non_2xx_status_is_not_retried() {
        let (url, server) = serve_once(500, "{\"error\": \"boom\"}".into());
        let backend = HttpBackend::new(config(url)).unwrap();
        let err = backend
            .complete(&bundle(), &DecodeParams::default())
            .unwrap_err();
        match err {
            BackendError::Status { status, .. } => assert_eq!(status, 500),
            other => panic!("unexpected error {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn unreachable_host_fails_after_three_attempts() {
        // Bind then drop a listener so the port is closed.
        let port = {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            listener.local_addr().unwrap().port()
        };
        let backend = HttpBackend::new(config(format!("http://127.0.0.1:{port}"))).unwrap();
        let err = backend
            .complete(&bundle(), &DecodeParams::default())
            .unwrap_err();
        match err {
            BackendError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_api_key_env_fails_construction() {
        let mut cfg = config("http://localhost".into());
        cfg.api_key_env = Some("CTRANK_TEST_NO_SUCH_VAR".into());
        assert!(matches!(
            HttpBackend::new(cfg),
            Err(BackendError::MissingApiKey(_))
        ));
    }
}
