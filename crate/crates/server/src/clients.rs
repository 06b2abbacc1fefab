//! Blocking JSON-over-HTTP clients for the two model backends.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use contextcrop_core::backend::{
    BackendError, CompleteRequest, CompleteResponse, GroundingBackend, GroundingRequest, GroundingResponse,
    TextGenBackend,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

#[derive(Clone)]
struct JsonClient {
    agent: Agent,
    url: String,
}

impl JsonClient {
    fn new(base: &str, path: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            url: format!("{}{}", base.trim_end_matches('/'), path),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, BackendError> {
        let mut resp = self.agent.post(&self.url).send_json(body).map_err(transport_error)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout,
        ureq::Error::Json(j) => BackendError::Protocol(j.to_string()),
        other => BackendError::Unreachable(other.to_string()),
    }
}

/// Text generation at `<base>/v1/complete`.
#[derive(Clone)]
pub struct HttpTextGen(JsonClient);

impl HttpTextGen {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        HttpTextGen(JsonClient::new(base_url, "/v1/complete", timeout))
    }
}

impl TextGenBackend for HttpTextGen {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let resp: CompleteResponse = self.0.post(&CompleteRequest {
            prompt: prompt.to_string(),
        })?;
        Ok(resp.text)
    }
}

/// Grounding at `<base>/v1/ground`.
#[derive(Clone)]
pub struct HttpGrounding(JsonClient);

impl HttpGrounding {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        HttpGrounding(JsonClient::new(base_url, "/v1/ground", timeout))
    }
}

impl GroundingBackend for HttpGrounding {
    fn ground(&self, request: &GroundingRequest) -> Result<GroundingResponse, BackendError> {
        self.0.post(request)
    }
}

/// Checks that something accepts TCP connections at the endpoint's host and port.
pub fn probe(base_url: &str, timeout: Duration) -> Result<(), BackendError> {
    let rest = base_url
        .split_once("://")
        .map(|(_, r)| r)
        .ok_or_else(|| BackendError::Unreachable(format!("`{base_url}` is not an http(s) URL")))?;
    let https = base_url.starts_with("https://");
    let authority = rest.split(['/', '?', '#']).next().unwrap_or_default();
    let target = if authority
        .rsplit_once(':')
        .is_some_and(|(_, p)| p.parse::<u16>().is_ok())
    {
        authority.to_string()
    } else {
        format!("{authority}:{}", if https { 443 } else { 80 })
    };
    let addrs = target
        .to_socket_addrs()
        .map_err(|e| BackendError::Unreachable(format!("{target}: {e}")))?;
    let mut last = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(_) => return Ok(()),
            Err(e) => last = Some(e),
        }
    }
    Err(BackendError::Unreachable(match last {
        Some(e) => format!("{target}: {e}"),
        None => format!("{target}: no addresses"),
    }))
}
