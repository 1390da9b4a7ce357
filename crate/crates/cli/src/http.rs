//! Chat-completions advisor backend over HTTP.

use std::time::{Duration, Instant};

use refine_core::advisor::{AdvisorPrompt, Backend, BackendError};
use serde_json::{json, Value};

use crate::config::{HttpConfig, API_KEY_VAR};

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    last_request: Option<Instant>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .field("has_key", &self.api_key.is_some())
            .finish()
    }
}

impl HttpBackend {
    /// Reads the bearer token from the `ADVISOR_API_KEY` environment variable.
    pub fn from_env(config: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.trim().is_empty());
        Self::new(config, key)
    }

    pub fn new(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { config, api_key, client, last_request: None })
    }

    pub fn request_body(&self, prompt: &AdvisorPrompt) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": self.config.system_prompt},
                {"role": "user", "content": prompt.rendered_text},
            ],
            "temperature": self.config.temperature,
        })
    }

    fn pace(&mut self) {
        let gap = Duration::from_millis(self.config.min_interval_ms);
        if let Some(last) = self.last_request {
            let since = last.elapsed();
            if since < gap {
                std::thread::sleep(gap - since);
            }
        }
        self.last_request = Some(Instant::now());
    }
}

/// Pulls `choices[0].message.content` out of a response body.
pub fn extract_content(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&mut self, prompt: &AdvisorPrompt) -> Result<String, BackendError> {
        let key = self.api_key.clone().ok_or_else(|| BackendError::Auth(format!("{API_KEY_VAR} is not set")))?;
        self.pace();
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(key)
            .json(&self.request_body(prompt))
            .send()
            .map_err(|e| BackendError::Transient(format!("request failed: {e}")))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::Transient(format!("reading body failed: {e}")))?;
        let snippet: String = body.chars().take(200).collect();
        match status.as_u16() {
            200..=299 => extract_content(&body),
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}: {snippet}"))),
            429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {snippet}"))),
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {snippet}"))),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::mock::{chat_body, MockServer};
    use super::*;
    use refine_core::advisor::{AdvisorClient, RetryPolicy};
    use refine_core::EnvKind;

    fn prompt() -> AdvisorPrompt {
        use refine_core::advisor::build_reward_prompt;
        use refine_core::advisor::CaseAnalysis;
        use refine_core::envs::{PongAction, PongState};
        let s = PongState { our_min_x: 40, opp_min_x: 40, ball_x: 44, ball_y: 60, vx: 1, vy: 2, our_score: 0, opp_score: 0 };
        build_reward_prompt(EnvKind::Pong, 0, 3, &s.to_state(), &PongAction::Stay.to_action(), &CaseAnalysis::empty(0))
    }

    fn backend(url: &str, key: Option<&str>) -> HttpBackend {
        let cfg = HttpConfig { endpoint: url.into(), min_interval_ms: 0, timeout_secs: 5, ..HttpConfig::default() };
        HttpBackend::new(cfg, key.map(str::to_owned)).unwrap()
    }

    #[test]
    fn request_shape_and_content() {
        let server = MockServer::start(vec![(200, chat_body("{reward = 0.5, analysis: fine}"))]);
        let mut b = backend(&server.url, Some("sk-test"));
        let p = prompt();
        assert_eq!(b.complete(&p).unwrap(), "{reward = 0.5, analysis: fine}");
        let reqs = server.join();
        assert_eq!(reqs.len(), 1);
        assert!(reqs[0].0.to_ascii_lowercase().contains("authorization: bearer sk-test"));
        let body: Value = serde_json::from_str(&reqs[0].1).unwrap();
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], p.rendered_text.as_str());
    }

    #[test]
    fn status_classes() {
        let server = MockServer::start(vec![
            (500, "oops".into()),
            (429, "slow down".into()),
            (401, "no".into()),
            (400, "bad".into()),
            (200, "{\"choices\": []}".into()),
        ]);
        let mut b = backend(&server.url, Some("k"));
        let p = prompt();
        assert!(matches!(b.complete(&p), Err(BackendError::Transient(_))));
        assert!(matches!(b.complete(&p), Err(BackendError::Transient(_))));
        assert!(matches!(b.complete(&p), Err(BackendError::Auth(_))));
        assert!(matches!(b.complete(&p), Err(BackendError::Fatal(_))));
        assert!(matches!(b.complete(&p), Err(BackendError::Fatal(_))));
        server.join();
    }

    #[test]
    fn missing_key_is_auth_error_without_traffic() {
        let mut b = backend("http://127.0.0.1:9/never", None);
        assert!(matches!(b.complete(&prompt()), Err(BackendError::Auth(_))));
    }

    #[test]
    fn refused_connection_is_transient() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut b = backend(&format!("http://127.0.0.1:{port}/x"), Some("k"));
        assert!(matches!(b.complete(&prompt()), Err(BackendError::Transient(_))));
    }

    #[test]
    fn client_retries_through_server_errors() {
        let server = MockServer::start(vec![
            (503, "busy".into()),
            (502, "busy".into()),
            (200, chat_body("{reward = -0.25, analysis: moving away}")),
        ]);
        let b = backend(&server.url, Some("k"));
        let mut client = AdvisorClient::new(Box::new(b))
            .with_retry(RetryPolicy { max_attempts: 3, base_delay_ms: 1, max_delay_ms: 2 })
            .with_sleeper(Box::new(|_| {}));
        let j = client.reward(&prompt()).unwrap().unwrap();
        assert_eq!(j.reward, -0.25);
        assert_eq!(client.stats().retries, 2);
        assert_eq!(server.join().len(), 3);
    }

    #[test]
    fn pacing_spaces_requests() {
        let server = MockServer::start(vec![(200, chat_body("a")), (200, chat_body("b"))]);
        let cfg = HttpConfig { endpoint: server.url.clone(), min_interval_ms: 150, timeout_secs: 5, ..HttpConfig::default() };
        let mut b = HttpBackend::new(cfg, Some("k".into())).unwrap();
        let t0 = Instant::now();
        b.complete(&prompt()).unwrap();
        b.complete(&prompt()).unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(150));
        server.join();
    }
}
