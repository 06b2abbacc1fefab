#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use contextcrop_core::backend::RetryPolicy;
use contextcrop_core::dialogue::{parse_dataset, Dataset, Role, Turn};
use contextcrop_core::fixtures::{FixtureGrounding, FixtureTextGen};
use contextcrop_core::keywords::Lexicon;
use contextcrop_core::pipeline::{Backends, PipelineConfig, Refiner};
use contextcrop_core::ContentItem;
use contextcrop_server::store::RatingStore;
use contextcrop_server::tasks::{EvaluatorEntry, RatingTask, TaskFile};
use contextcrop_server::AppState;
use http_body_util::BodyExt;
use tower::ServiceExt;

pub fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

pub fn corpus_dataset() -> Dataset {
    parse_dataset(fs::read(corpus().join("dataset.jsonl")).unwrap().as_slice()).unwrap()
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Refiner over the fixture backends, configured like the golden run.
pub fn fixture_refiner() -> Refiner {
    let dir = corpus().join("backends");
    let backends = Backends {
        lexicon: Some(Lexicon::seed()),
        retry: RetryPolicy {
            retries: 2,
            base_delay_ms: 0,
        },
        ..Backends::new(
            Arc::new(FixtureTextGen::load(&dir).unwrap()),
            Arc::new(FixtureGrounding::load(&dir).unwrap()),
        )
    };
    Refiner::new(PipelineConfig::default(), backends).unwrap()
}

/// `evaluators` evaluators and `tasks` tasks: task k is response k % 2 of session k / 2.
pub fn task_file(evaluators: u32, tasks: usize) -> TaskFile {
    TaskFile {
        evaluators: (1..=evaluators)
            .map(|n| EvaluatorEntry {
                token: format!("tok-{n}"),
                evaluator: n,
            })
            .collect(),
        tasks: (0..tasks)
            .map(|k| RatingTask {
                task_id: format!("task-{k}"),
                session_id: format!("sess-{}", k / 2),
                response_index: (k % 2) as u32,
                image_ids: vec![format!("img-{}", k / 2)],
                excerpt: vec![Turn::new(
                    0,
                    Role::Patient,
                    vec![ContentItem::text(format!("question {k}"))],
                )],
                treatment: format!("answer {k} one"),
                reference: format!("answer {k} two"),
            })
            .collect(),
    }
}

pub fn state(tasks: TaskFile, store_path: &Path, seed: u64, refiner: Option<Refiner>) -> AppState {
    let store = RatingStore::open(store_path).unwrap();
    AppState::new(seed, tasks, store, None, refiner, 2, 256 * 1024).unwrap()
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| serde_json::Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

pub fn get(uri: &str, token: Option<&str>) -> Request<Body> {
    let mut b = Request::get(uri);
    if let Some(t) = token {
        b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    b.body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, token: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header(header::AUTHORIZATION, format!("Bearer {token}"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

pub enum Part<'a> {
    File(&'a str, &'a [u8]),
    Text(&'a str, &'a str),
    Json(&'a str, String),
}

const BOUNDARY: &str = "contextcrop-test-boundary";

pub fn multipart(uri: &str, parts: &[Part]) -> Request<Body> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"upload\"\r\nContent-Type: application/octet-stream\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
            Part::Text(name, text) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{text}").as_bytes(),
                );
            }
            Part::Json(name, json) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"\r\nContent-Type: application/json\r\n\r\n{json}")
                        .as_bytes(),
                );
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post(uri)
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(body))
        .unwrap()
}
