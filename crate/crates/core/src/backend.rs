//! Pluggable model backends: the text-generation model used for keyword
//! extraction and the zero-shot grounding model. Both are external services;
//! this module defines their contracts and the retry policy around them.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RawBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("fixture backend: {0}")]
    Fixture(String),
}

/// `POST /v1/complete` with `{prompt}` answering `{text}`.
pub trait TextGenBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

/// `POST /v1/ground` with a [`GroundingRequest`] answering a [`GroundingResponse`].
pub trait GroundingBackend: Send + Sync {
    fn ground(&self, request: &GroundingRequest) -> Result<GroundingResponse, BackendError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

/// Body of a grounding call. `image` is the encoded file, base64 on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRequest {
    pub image_id: String,
    #[serde(with = "base64_bytes")]
    pub image: Vec<u8>,
    pub phrases: Vec<String>,
    /// The phrases joined as `"a . b . c ."`, the caption form open-set detectors expect.
    pub caption: String,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl GroundingRequest {
    pub fn caption_for(phrases: &[String]) -> String {
        phrases.iter().map(|p| format!("{p} .")).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    #[serde(rename = "box")]
    pub bbox: RawBox,
    pub phrase: String,
    pub box_score: f64,
    pub phrase_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingResponse {
    pub detections: Vec<RawDetection>,
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// Retries with exponential backoff: `base_delay`, `2 * base_delay`, ...
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            retries: 0,
            base_delay_ms: 0,
        }
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= self.retries => return Err(e),
                Err(e) => {
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("backend call failed ({e}), retry {} in {delay} ms", attempt + 1);
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
            }
        }
    }
}

/// A backend that is never reachable.
#[derive(Debug, Clone, Default)]
pub struct Unavailable;

impl TextGenBackend for Unavailable {
    fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Unreachable(
            "no text-generation backend configured".into(),
        ))
    }
}

impl GroundingBackend for Unavailable {
    fn ground(&self, _request: &GroundingRequest) -> Result<GroundingResponse, BackendError> {
        Err(BackendError::Unreachable("no grounding backend configured".into()))
    }
}
