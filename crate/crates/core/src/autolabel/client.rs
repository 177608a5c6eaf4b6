//! Optional HTTP captioner / judge client.
//!
//! Request body: `{"frames": [<base64 RLE raster JSON>...], "prompt_id": "..."}`.
//! Response body: `{"label": "..."}` or `{"text": "..."}`.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::world::RleRaster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { url: None, timeout_ms: 2000, retries: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub frames: Vec<String>,
    pub prompt_id: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaptionResponse {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

pub fn encode_frames(frames: &[RleRaster]) -> Vec<String> {
    frames
        .iter()
        .map(|f| {
            let json = serde_json::to_vec(f).expect("raster serializes");
            base64::engine::general_purpose::STANDARD.encode(json)
        })
        .collect()
}

pub trait Captioner {
    fn query(&self, req: &CaptionRequest) -> Result<CaptionResponse, ClientError>;
}

/// Blocking JSON-over-HTTP captioner.
#[derive(Debug, Clone)]
pub struct HttpCaptioner {
    pub url: String,
    pub timeout: Duration,
    pub retries: u32,
}

impl HttpCaptioner {
    pub fn from_config(cfg: &ClientConfig) -> Option<Self> {
        cfg.url.as_ref().map(|u| Self {
            url: u.clone(),
            timeout: Duration::from_millis(cfg.timeout_ms),
            retries: cfg.retries,
        })
    }
}

impl Captioner for HttpCaptioner {
    fn query(&self, req: &CaptionRequest) -> Result<CaptionResponse, ClientError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match agent.post(&self.url).send_json(req) {
                Ok(resp) => {
                    let body = resp.into_string().map_err(|e| ClientError::Transport(e.to_string()))?;
                    let parsed: CaptionResponse =
                        serde_json::from_str(&body).map_err(|e| ClientError::Malformed(e.to_string()))?;
                    if parsed.label.is_none() && parsed.text.is_none() {
                        return Err(ClientError::Malformed("neither label nor text".into()));
                    }
                    return Ok(parsed);
                }
                Err(e) => {
                    log::debug!("captioner attempt {attempt} failed: {e}");
                    last = e.to_string();
                }
            }
        }
        Err(ClientError::Transport(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn serve_once(body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let _ = s.read(&mut buf);
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            s.write_all(resp.as_bytes()).unwrap();
        });
        format!("http://{addr}/")
    }

    fn req() -> CaptionRequest {
        CaptionRequest { frames: vec![], prompt_id: "interestingness".into() }
    }

    #[test]
    fn well_formed_label() {
        let c = HttpCaptioner { url: serve_once(r#"{"label":"interesting"}"#), timeout: Duration::from_secs(2), retries: 0 };
        assert_eq!(c.query(&req()).unwrap().label.as_deref(), Some("interesting"));
    }

    #[test]
    fn malformed_body_is_an_error() {
        let c = HttpCaptioner { url: serve_once("not json"), timeout: Duration::from_secs(2), retries: 0 };
        assert!(matches!(c.query(&req()), Err(ClientError::Malformed(_))));
    }

    #[test]
    fn unreachable_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let c = HttpCaptioner { url: format!("http://127.0.0.1:{port}/"), timeout: Duration::from_millis(200), retries: 1 };
        assert!(matches!(c.query(&req()), Err(ClientError::Transport(_))));
    }
}
