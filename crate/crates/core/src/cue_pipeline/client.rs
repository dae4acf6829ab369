use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{CueError, CuePrompt};

pub const ENV_ENDPOINT: &str = "HCVC_VLM_ENDPOINT";
pub const ENV_TOKEN: &str = "HCVC_VLM_TOKEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub endpoint: String,
    /// Bearer token; never written to manifests.
    #[serde(skip)]
    pub token: Option<String>,
    pub timeout_ms: u64,
    /// Extra attempts after the first one for timeouts and 5xx responses.
    pub retries: usize,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
    /// Send local image files inline as base64 instead of by reference.
    pub inline_images: bool,
}

impl VlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 500,
            inline_images: false,
        }
    }

    /// Fills the endpoint (when empty) and token from the environment.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_empty() {
            if let Ok(e) = std::env::var(ENV_ENDPOINT) {
                self.endpoint = e;
            }
        }
        if self.token.is_none() {
            self.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        }
        self
    }
}

#[derive(Serialize)]
struct Request<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_base64: Option<String>,
    prompt: &'a str,
}

/// Blocking HTTP client for a VLM endpoint answering
/// `POST {image_ref | image_base64, prompt}` with `{text}`.
#[derive(Debug)]
pub struct VlmClient {
    cfg: VlmConfig,
    agent: ureq::Agent,
    requests: AtomicUsize,
}

impl VlmClient {
    pub fn new(cfg: VlmConfig) -> Result<Self, CueError> {
        if cfg.endpoint.is_empty() {
            return Err(CueError::Config(format!("no VLM endpoint configured (set {ENV_ENDPOINT})")));
        }
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(cfg.timeout_ms)).build();
        Ok(Self { cfg, agent, requests: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.cfg
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn complete(&self, image_id: &str, image_ref: &str, prompt: &CuePrompt) -> Result<String, CueError> {
        let image_base64 = if self.cfg.inline_images && Path::new(image_ref).is_file() {
            let bytes = std::fs::read(image_ref).map_err(|e| CueError::Request {
                image_id: image_id.to_string(),
                attempts: 0,
                reason: format!("reading {image_ref}: {e}"),
            })?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        } else {
            None
        };
        let body = Request {
            image_ref: image_base64.is_none().then_some(image_ref),
            image_base64,
            prompt: &prompt.template,
        };
        let attempts = self.cfg.retries + 1;
        let mut last_reason = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self.agent.post(&self.cfg.endpoint);
            if let Some(token) = &self.cfg.token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(&body) {
                Ok(resp) => {
                    let raw = resp.into_string().map_err(|e| CueError::Request {
                        image_id: image_id.to_string(),
                        attempts: attempt + 1,
                        reason: e.to_string(),
                    })?;
                    return parse_response(image_id, raw);
                }
                Err(ureq::Error::Status(code, resp)) if code >= 500 => {
                    let text = resp.into_string().unwrap_or_default();
                    last_reason = format!("HTTP {code}: {text}");
                    log::warn!("VLM {image_id}: {last_reason} (attempt {})", attempt + 1);
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(CueError::Request {
                        image_id: image_id.to_string(),
                        attempts: attempt + 1,
                        reason: format!("HTTP {code}: {text}"),
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    last_reason = t.to_string();
                    log::warn!("VLM {image_id}: {last_reason} (attempt {})", attempt + 1);
                }
            }
        }
        Err(CueError::Request { image_id: image_id.to_string(), attempts, reason: last_reason })
    }
}

fn parse_response(image_id: &str, raw: String) -> Result<String, CueError> {
    #[derive(Deserialize)]
    struct Response {
        text: String,
    }
    match serde_json::from_str::<Response>(&raw) {
        Ok(r) if !r.text.trim().is_empty() => Ok(r.text),
        Ok(_) => Err(CueError::MalformedResponse {
            image_id: image_id.to_string(),
            reason: "empty text".into(),
            raw,
        }),
        Err(e) => Err(CueError::MalformedResponse { image_id: image_id.to_string(), reason: e.to_string(), raw }),
    }
}
