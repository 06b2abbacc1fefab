//! HTTP surface of the rating and refinement service.

mod common;

use axum::http::StatusCode;
use base64::Engine;
use common::*;
use contextcrop_core::assessment::{build_report, parse_ratings, TestMethod};
use contextcrop_server::blinding::{assignment, Slot};
use contextcrop_server::router;
use serde_json::json;

/// Scores so that the stored (treatment, reference) equals `(r, r_ref)`.
fn blinded_scores(seed: u64, task_id: &str, r: i64, r_ref: i64) -> (i64, i64) {
    match assignment(seed, task_id).treatment {
        Slot::A => (r, r_ref),
        Slot::B => (r_ref, r),
    }
}

#[tokio::test]
async fn fresh_evaluator_gets_first_task_with_rubric() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(2, 4), &dir.path().join("r.jsonl"), 11, None));
    let (status, body) = call(&app, get("/api/tasks/next", Some("tok-1"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "task");
    assert_eq!(body["task_id"], "task-0");
    assert_eq!(body["rubric"].as_array().unwrap().len(), 5);
    assert_eq!(body["progress"], json!({"rated": 0, "total": 4}));
    let shown = [
        body["responses"]["A"].as_str().unwrap(),
        body["responses"]["B"].as_str().unwrap(),
    ];
    let mut sorted = shown;
    sorted.sort();
    assert_eq!(sorted, ["answer 0 one", "answer 0 two"]);
    let text = body.to_string();
    assert!(!text.contains("treatment") && !text.contains("reference"), "{text}");
}

#[tokio::test]
async fn authentication_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(1, 2), &dir.path().join("r.jsonl"), 0, None));
    assert_eq!(
        call(&app, get("/api/tasks/next", None)).await.0,
        StatusCode::UNAUTHORIZED
    );
    assert_eq!(
        call(&app, get("/api/tasks/next", Some("tok-9"))).await.0,
        StatusCode::UNAUTHORIZED
    );
    let sub = json!({"task_id": "task-0", "score_a": 1, "score_b": 1});
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-9", sub)).await.0,
        StatusCode::UNAUTHORIZED
    );
}

#[tokio::test]
async fn submissions_are_unblinded_and_stored() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let seed = 5;
    let tasks = task_file(1, 16);
    // one task per slot order, so both un-blinding directions are exercised
    let a_task = tasks
        .tasks
        .iter()
        .find(|t| assignment(seed, &t.task_id).treatment == Slot::A)
        .unwrap()
        .clone();
    let b_task = tasks
        .tasks
        .iter()
        .find(|t| assignment(seed, &t.task_id).treatment == Slot::B)
        .unwrap()
        .clone();
    let app = router(state(tasks, &path, seed, None));
    for t in [&a_task, &b_task] {
        let sub = json!({"task_id": t.task_id, "score_a": 3, "score_b": 4});
        let (status, body) = call(&app, post_json("/api/ratings", "tok-1", sub)).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
    }
    let stored = parse_ratings(std::fs::read(&path).unwrap().as_slice()).unwrap();
    let find = |t: &contextcrop_server::tasks::RatingTask| {
        stored
            .records()
            .iter()
            .find(|r| r.session == t.session_id && r.response_index == t.response_index)
            .unwrap()
            .clone()
    };
    let a = find(&a_task);
    assert_eq!((a.score_treatment.get(), a.score_reference.get()), (3, 4));
    let b = find(&b_task);
    assert_eq!((b.score_treatment.get(), b.score_reference.get()), (4, 3));
    assert_eq!(a.images.0, a_task.image_ids);
}

#[tokio::test]
async fn invalid_submissions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(2, 2), &dir.path().join("r.jsonl"), 0, None));
    let sub = |a: i64, b: i64| json!({"task_id": "task-0", "score_a": a, "score_b": b});
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", sub(5, 1))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", sub(-1, 1))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", sub(2, 1))).await.0,
        StatusCode::CREATED
    );
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", sub(2, 1))).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-2", sub(2, 1))).await.0,
        StatusCode::CREATED
    );
    let unknown = json!({"task_id": "nope", "score_a": 1, "score_b": 1});
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", unknown)).await.0,
        StatusCode::NOT_FOUND
    );
    let impostor = json!({"task_id": "task-1", "evaluator": 2, "score_a": 1, "score_b": 1});
    assert_eq!(
        call(&app, post_json("/api/ratings", "tok-1", impostor)).await.0,
        StatusCode::FORBIDDEN
    );
}

#[tokio::test]
async fn queue_advances_and_exhausts() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(1, 3), &dir.path().join("r.jsonl"), 0, None));
    for k in 0..3 {
        let (_, body) = call(&app, get("/api/tasks/next", Some("tok-1"))).await;
        assert_eq!(body["task_id"], format!("task-{k}"));
        let sub = json!({"task_id": body["task_id"], "score_a": 2, "score_b": 2});
        call(&app, post_json("/api/ratings", "tok-1", sub)).await;
    }
    let (status, body) = call(&app, get("/api/tasks/next", Some("tok-1"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!({"status": "exhausted", "progress": {"rated": 3, "total": 3}})
    );
}

#[tokio::test]
async fn order_and_progress_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let seed = 42;
    let first = router(state(task_file(1, 6), &path, seed, None));
    let (_, before) = call(&first, get("/api/tasks/next", Some("tok-1"))).await;
    call(
        &first,
        post_json(
            "/api/ratings",
            "tok-1",
            json!({"task_id": "task-0", "score_a": 1, "score_b": 2}),
        ),
    )
    .await;
    drop(first);

    let again = router(state(task_file(1, 6), &path, seed, None));
    let (_, next) = call(&again, get("/api/tasks/next", Some("tok-1"))).await;
    assert_eq!(next["task_id"], "task-1");
    assert_eq!(next["progress"]["rated"], 1);
    // same task under the same seed shows the same order
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = router(state(task_file(1, 6), &fresh_dir.path().join("r.jsonl"), seed, None));
    let (_, replay) = call(&fresh, get("/api/tasks/next", Some("tok-1"))).await;
    assert_eq!(replay["responses"], before["responses"]);
}

#[tokio::test]
async fn report_states() {
    let dir = tempfile::tempdir().unwrap();
    let seed = 3;
    let app = router(state(task_file(2, 2), &dir.path().join("r.jsonl"), seed, None));
    let (status, body) = call(&app, get("/api/reports/dmos", None)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["status"], "empty");

    // one session, two responses, two evaluators: differences 1, 0 and 1, 1
    let plan = [
        ("tok-1", "task-0", 4, 3),
        ("tok-1", "task-1", 3, 3),
        ("tok-2", "task-0", 3, 2),
    ];
    for (tok, task, r, r_ref) in plan {
        let (a, b) = blinded_scores(seed, task, r, r_ref);
        let sub = json!({"task_id": task, "score_a": a, "score_b": b});
        assert_eq!(
            call(&app, post_json("/api/ratings", tok, sub)).await.0,
            StatusCode::CREATED
        );
    }
    let (status, body) = call(&app, get("/api/reports/dmos", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "incomplete");
    assert_eq!(
        body["missing"],
        json!([{"evaluator": 2, "task_id": "task-1", "session": "sess-0", "response_index": 1}])
    );

    let (a, b) = blinded_scores(seed, "task-1", 4, 3);
    call(
        &app,
        post_json(
            "/api/ratings",
            "tok-2",
            json!({"task_id": "task-1", "score_a": a, "score_b": b}),
        ),
    )
    .await;
    let (status, body) = call(&app, get("/api/reports/dmos?test=wilcoxon", None)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "complete");
    assert_eq!(body["report"]["session_dmos"]["sess-0"], 0.75);
    assert_eq!(body["report"]["method"], "wilcoxon");

    let (status, _) = call(&app, get("/api/reports/dmos?cutoff=2", None)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn equal_scores_give_zero_dmos() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(2, 4), &dir.path().join("r.jsonl"), 9, None));
    for tok in ["tok-1", "tok-2"] {
        for k in 0..4 {
            let sub = json!({"task_id": format!("task-{k}"), "score_a": (k % 5) as i64, "score_b": (k % 5) as i64});
            call(&app, post_json("/api/ratings", tok, sub)).await;
        }
    }
    let (_, body) = call(&app, get("/api/reports/dmos", None)).await;
    for v in body["report"]["session_dmos"].as_object().unwrap().values() {
        assert_eq!(v, 0.0);
    }
    for v in body["report"]["image_dmos"].as_object().unwrap().values() {
        assert_eq!(v, 0.0);
    }
}

#[tokio::test]
async fn rubric_lists_five_grades() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(task_file(1, 1), &dir.path().join("r.jsonl"), 0, None));
    let (status, body) = call(&app, get("/api/rubric", None)).await;
    assert_eq!(status, StatusCode::OK);
    let scores: Vec<u64> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["score"].as_u64().unwrap())
        .collect();
    assert_eq!(scores, [4, 3, 2, 1, 0]);
}

/// Scripted evaluators rate everything; the stored records must match the
/// intended scores and the service report must equal a direct computation.
#[tokio::test]
async fn scripted_rating_pass_round_trips() {
    for seed in [1u64, 2, 3] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let app = router(state(task_file(3, 8), &path, seed, None));
        let intended = |n: u32, k: usize| (((n as usize + k) % 5) as i64, ((n as usize * 3 + k) % 5) as i64);
        for n in 1..=3u32 {
            let tok = format!("tok-{n}");
            loop {
                let (_, task) = call(&app, get("/api/tasks/next", Some(&tok))).await;
                let text = task.to_string();
                assert!(!text.contains("treatment") && !text.contains("reference"));
                if task["status"] == "exhausted" {
                    break;
                }
                let id = task["task_id"].as_str().unwrap().to_string();
                let k: usize = id.trim_start_matches("task-").parse().unwrap();
                let (r, r_ref) = intended(n, k);
                // the scripted evaluator finds its intended answer by text
                let (a, b) = if task["responses"]["A"] == format!("answer {k} one") {
                    (r, r_ref)
                } else {
                    (r_ref, r)
                };
                let (status, ack) = call(
                    &app,
                    post_json("/api/ratings", &tok, json!({"task_id": id, "score_a": a, "score_b": b})),
                )
                .await;
                assert_eq!(status, StatusCode::CREATED);
                assert!(!ack.to_string().contains("treatment"));
            }
        }
        let stored = parse_ratings(std::fs::read(&path).unwrap().as_slice()).unwrap();
        assert_eq!(stored.records().len(), 24);
        for rec in stored.records() {
            let k = rec.session.trim_start_matches("sess-").parse::<usize>().unwrap() * 2 + rec.response_index as usize;
            let (r, r_ref) = intended(rec.evaluator, k);
            assert_eq!(
                (
                    i64::from(rec.score_treatment.get()),
                    i64::from(rec.score_reference.get())
                ),
                (r, r_ref)
            );
        }
        let (_, body) = call(&app, get("/api/reports/dmos", None)).await;
        let direct = build_report(&stored, None, 0.7, TestMethod::TTest).unwrap();
        assert_eq!(body["report"], serde_json::to_value(&direct).unwrap());
    }
}

#[tokio::test]
async fn refine_without_context_returns_original() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(
        task_file(1, 1),
        &dir.path().join("r.jsonl"),
        0,
        Some(fixture_refiner()),
    ));
    let bytes = std::fs::read(corpus().join("images/derm/d1.png")).unwrap();
    let (status, body) = call(
        &app,
        multipart(
            "/api/refine",
            &[Part::File("image", &bytes), Part::Text("image_id", "d1")],
        ),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["result"]["status"], "unchanged");
    assert_eq!(body["result"]["reason"], "no_context");
    assert_eq!(body["result"]["area_ratio"], 1.0);
    let returned = base64::engine::general_purpose::STANDARD
        .decode(body["image"].as_str().unwrap())
        .unwrap();
    assert_eq!(returned, bytes);
}

#[tokio::test]
async fn refine_with_plain_text_context_crops() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(
        task_file(1, 1),
        &dir.path().join("r.jsonl"),
        0,
        Some(fixture_refiner()),
    ));
    let bytes = std::fs::read(corpus().join("images/oph/o2.png")).unwrap();
    let req = multipart(
        "/api/refine",
        &[
            Part::Text("image_id", "o2"),
            Part::Text("context", "My left eye is red and swollen since yesterday"),
            Part::File("image", &bytes),
        ],
    );
    let (status, body) = call(&app, req).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["result"]["status"], "cropped");
    assert_eq!(body["result"]["crop_box"], json!([50, 20, 150, 80]));
    assert_eq!(body["format"], "png");
    let out = base64::engine::general_purpose::STANDARD
        .decode(body["image"].as_str().unwrap())
        .unwrap();
    assert_ne!(out, bytes);
}

#[tokio::test]
async fn refine_guards() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(
        task_file(1, 1),
        &dir.path().join("r.jsonl"),
        0,
        Some(fixture_refiner()),
    ));
    let big = vec![0u8; 300 * 1024];
    let (status, _) = call(&app, multipart("/api/refine", &[Part::File("image", &big)])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    let (status, _) = call(&app, multipart("/api/refine", &[Part::File("image", b"plain text")])).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let (status, _) = call(&app, multipart("/api/refine", &[Part::Text("context", "hi")])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(
        &app,
        multipart("/api/refine", &[Part::Json("context", "{\"role\":\"nurse\"}".into())]),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let no_backends = router(state(task_file(1, 1), &dir.path().join("r2.jsonl"), 0, None));
    let png = std::fs::read(corpus().join("images/derm/d1.png")).unwrap();
    let (status, _) = call(&no_backends, multipart("/api/refine", &[Part::File("image", &png)])).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}
