//! JSON-over-HTTP transport.
//!
//! Each call is a `POST` to the configured URL with body
//! `{"role": ..., "prompt": ..., "audio": <base64 file bytes, optional>,
//! "audio_offset_sec": <number, optional>}` and expects `{"text": ...}` back.
//! A bearer token is read from `MFKIT_PROVIDER_TOKEN` when set. Connection
//! failures, 429 and 5xx are transient; other statuses are rejections.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ProviderRequest, Role, Transport, TransportError};

pub const TOKEN_ENV: &str = "MFKIT_PROVIDER_TOKEN";

#[derive(Serialize)]
struct Body<'a> {
    role: Role,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    audio: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    audio_offset_sec: Option<f64>,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

pub struct HttpTransport {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: &str) -> Self {
        Self {
            url: url.to_owned(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }
}

/// Split `path#t=<seconds>` into path and offset.
fn split_audio_ref(audio_ref: &str) -> (&str, Option<f64>) {
    match audio_ref.rsplit_once("#t=") {
        Some((path, t)) => (path, t.parse().ok()),
        None => (audio_ref, None),
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &ProviderRequest, prompt: &str) -> Result<String, TransportError> {
        let (audio, audio_offset_sec) = match &request.audio_ref {
            Some(r) => {
                let (path, offset) = split_audio_ref(r);
                let bytes = std::fs::read(path)
                    .map_err(|e| TransportError::Rejected(format!("reading audio {path}: {e}")))?;
                (Some(base64::engine::general_purpose::STANDARD.encode(bytes)), offset)
            }
            None => (None, None),
        };
        let body = Body { role: request.role, prompt, audio, audio_offset_sec };
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(token) = &self.token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let json = serde_json::to_string(&body).expect("body serializes");
        match call.send_string(&json) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| TransportError::Transient(e.to_string()))?;
                let reply: Reply = serde_json::from_str(&text)
                    .map_err(|e| TransportError::Rejected(format!("bad reply body: {e}")))?;
                Ok(reply.text)
            }
            Err(ureq::Error::Status(code, resp)) => {
                let msg = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                if code == 429 || code >= 500 {
                    Err(TransportError::Transient(msg))
                } else {
                    Err(TransportError::Rejected(msg))
                }
            }
            Err(e) => Err(TransportError::Transient(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_ref_offsets() {
        assert_eq!(split_audio_ref("a/b.wav#t=30"), ("a/b.wav", Some(30.0)));
        assert_eq!(split_audio_ref("a/b.wav"), ("a/b.wav", None));
    }
}
