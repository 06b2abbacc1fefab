//! The browser operations checked natively against the pipeline's own outputs.

use std::fs;
use std::path::{Path, PathBuf};

use contextcrop_core::pipeline::{read_provenance, ProvenanceRecord};
use contextcrop_core::roi::{RefinementReason, RefinementStatus};
use contextcrop_web::ops::{self, ReportOutcome};
use proptest::prelude::*;
use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden_records() -> Vec<ProvenanceRecord> {
    read_provenance(
        fs::read(root().join("fixtures/golden/provenance.jsonl"))
            .unwrap()
            .as_slice(),
    )
    .unwrap()
}

#[test]
fn preview_reproduces_every_grounded_corpus_image() {
    let mut checked = 0;
    for rec in golden_records() {
        if matches!(
            rec.result.reason,
            RefinementReason::NoContext | RefinementReason::BackendError
        ) {
            continue;
        }
        let path = root().join(format!("fixtures/corpus/backends/grounding/{}.json", rec.image_id));
        let fixture: Vec<Value> = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        let entry = fixture
            .iter()
            .find(|e| e["phrases"] == json!(rec.keywords.keywords))
            .unwrap_or_else(|| panic!("{}: no fixture for {:?}", rec.image_id, rec.keywords.keywords));
        let p = ops::preview_crop(
            &entry["detections"].to_string(),
            rec.result.width,
            rec.result.height,
            0.35,
            0.25,
        )
        .unwrap();
        assert_eq!(p.kept, rec.detections, "{}", rec.image_id);
        assert_eq!(p.status, rec.result.status, "{}", rec.image_id);
        assert_eq!(p.reason, rec.result.reason, "{}", rec.image_id);
        assert_eq!(p.crop_box, rec.result.crop_box, "{}", rec.image_id);
        assert_eq!(p.area_ratio, rec.result.area_ratio, "{}", rec.image_id);
        checked += 1;
    }
    // everything except the image without context and the one whose keyword backend failed
    assert_eq!(checked, 10);
}

fn det(b: [f64; 4], box_score: f64, phrase_score: f64) -> Value {
    json!({"box": b, "phrase": "x", "box_score": box_score, "phrase_score": phrase_score})
}

#[test]
fn thresholds_are_inclusive() {
    let at = json!([det([0.0, 0.0, 10.0, 10.0], 0.35, 0.25)]).to_string();
    let p = ops::preview_crop(&at, 100, 100, 0.35, 0.25).unwrap();
    assert_eq!((p.kept.len(), p.dropped), (1, 0));
    for (b, t) in [(0.3499, 0.25), (0.35, 0.2499)] {
        let below = json!([det([0.0, 0.0, 10.0, 10.0], b, t)]).to_string();
        let p = ops::preview_crop(&below, 100, 100, 0.35, 0.25).unwrap();
        assert_eq!((p.kept.len(), p.dropped), (0, 1));
        assert_eq!(p.reason, RefinementReason::NoDetections);
        assert_eq!(p.area_ratio, 1.0);
    }
}

#[test]
fn preview_accepts_a_full_response_and_rejects_bad_input() {
    let resp = json!({"detections": [det([10.0, 10.0, 30.0, 20.0], 0.9, 0.9)]}).to_string();
    let p = ops::preview_crop(&resp, 40, 40, 0.35, 0.25).unwrap();
    assert_eq!(p.crop_box.unwrap().to_array(), [10, 10, 30, 20]);
    assert!((p.area_ratio - 200.0 / 1600.0).abs() < 1e-15);

    assert!(ops::preview_crop("[]", 0, 10, 0.35, 0.25).is_err());
    assert!(ops::preview_crop("[]", 10, 10, 1.5, 0.25).is_err());
    assert!(ops::preview_crop("{\"nope\": 1}", 10, 10, 0.35, 0.25).is_err());

    // a box wholly outside the frame is dropped, not clamped into a sliver
    let outside = json!([det([50.0, 50.0, 60.0, 60.0], 0.9, 0.9)]).to_string();
    let p = ops::preview_crop(&outside, 40, 40, 0.35, 0.25).unwrap();
    assert_eq!((p.kept.len(), p.dropped, p.status), (0, 1, RefinementStatus::Unchanged));
}

proptest! {
    #[test]
    fn preview_crop_is_the_hull_of_kept_boxes(
        w in 1u32..300,
        h in 1u32..300,
        raw in prop::collection::vec(
            ((-50.0f64..350.0, -50.0f64..350.0, 0.5f64..200.0, 0.5f64..200.0), 0.0f64..=1.0, 0.0f64..=1.0),
            0..8,
        ),
        box_t in 0.0f64..=1.0,
        text_t in 0.0f64..=1.0,
    ) {
        let dets: Vec<Value> = raw
            .iter()
            .map(|((x, y, dw, dh), b, t)| det([*x, *y, x + dw, y + dh], *b, *t))
            .collect();
        let p = ops::preview_crop(&Value::from(dets).to_string(), w, h, box_t, text_t).unwrap();
        prop_assert_eq!(p.kept.len() + p.dropped, raw.len());
        for d in &p.kept {
            prop_assert!(d.box_score >= box_t && d.phrase_score >= text_t);
            prop_assert!(d.bbox.fits_in(w, h));
        }
        match p.crop_box {
            None => {
                prop_assert!(p.kept.is_empty());
                prop_assert_eq!(p.area_ratio, 1.0);
            }
            Some(b) => {
                let k: Vec<[u32; 4]> = p.kept.iter().map(|d| d.bbox.to_array()).collect();
                let hull = [
                    k.iter().map(|b| b[0]).min().unwrap(),
                    k.iter().map(|b| b[1]).min().unwrap(),
                    k.iter().map(|b| b[2]).max().unwrap(),
                    k.iter().map(|b| b[3]).max().unwrap(),
                ];
                prop_assert_eq!(b.to_array(), hull);
                let expect = f64::from(b.width()) * f64::from(b.height()) / (f64::from(w) * f64::from(h));
                prop_assert_eq!(p.area_ratio, expect);
                prop_assert!(p.area_ratio > 0.0 && p.area_ratio <= 1.0);
            }
        }
    }
}

#[test]
fn context_window_matches_corpus() {
    let dataset = fs::read_to_string(root().join("fixtures/corpus/dataset.jsonl")).unwrap();
    let w = ops::context_window(&dataset, "oph-002", "o4", 3).unwrap();
    assert_eq!(w.turns_used, 3);
    assert_eq!(w.entries.last().unwrap().text, "Yes, the upper eyelid");
    let one = ops::context_window(&dataset, "oph-002", "o4", 1).unwrap();
    assert_eq!(one.turns_used, 1);
    assert!(w.entries.ends_with(&one.entries));
    assert!(ops::context_window(&dataset, "nope", "o4", 3).is_err());
    assert!(ops::context_window(&dataset, "oph-002", "nope", 3).is_err());
    assert!(ops::context_window("{", "oph-002", "o4", 3).is_err());
}

const RATINGS: &str = r#"{"evaluator":1,"session":"s","response_index":0,"image_id":"d1","score_treatment":4,"score_reference":3}
{"evaluator":1,"session":"s","response_index":1,"image_id":"d3","score_treatment":3,"score_reference":3}
{"evaluator":2,"session":"s","response_index":0,"image_id":"d1","score_treatment":3,"score_reference":2}
{"evaluator":2,"session":"s","response_index":1,"image_id":"d3","score_treatment":4,"score_reference":3}
"#;

#[test]
fn dmos_report_outcomes() {
    let provenance = fs::read_to_string(root().join("fixtures/golden/provenance.jsonl")).unwrap();
    match ops::dmos_report(RATINGS, &provenance, 0.7, "wilcoxon").unwrap() {
        ReportOutcome::Complete {
            report,
            table,
            histogram,
        } => {
            assert_eq!(report.session_dmos["s"], 0.75);
            assert_eq!(report.image_dmos["d1"], 1.0);
            assert_eq!(report.cropped_image_dmos.unwrap().keys().collect::<Vec<_>>(), ["d1"]);
            assert!(table.contains("0.750"));
            assert_eq!(histogram.unwrap().counts, [1, 4, 0, 1, 6]);
        }
        other => panic!("{other:?}"),
    }
    match ops::dmos_report(RATINGS, "", 0.7, "t").unwrap() {
        ReportOutcome::Complete { report, histogram, .. } => {
            assert!(report.cropped_image_dmos.is_none());
            assert!(histogram.is_none());
        }
        other => panic!("{other:?}"),
    }

    let partial: String = RATINGS.lines().take(3).map(|l| format!("{l}\n")).collect();
    match ops::dmos_report(&partial, "", 0.7, "t").unwrap() {
        ReportOutcome::Incomplete { missing } => {
            assert_eq!(missing.len(), 1);
            assert_eq!((missing[0].evaluator, missing[0].response_index), (2, 1));
        }
        other => panic!("{other:?}"),
    }

    for cutoff in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(ops::dmos_report(RATINGS, "", cutoff, "t").is_err(), "{cutoff}");
    }
    assert!(ops::dmos_report(RATINGS, "", 1.0, "t").is_ok());
    assert!(ops::dmos_report(RATINGS, "", 0.7, "anova").is_err());
    assert!(ops::dmos_report("{}", "", 0.7, "t").is_err());
}

#[test]
fn exports_return_json() {
    let out = contextcrop_web::preview_crop(
        &json!([det([0.0, 0.0, 5.0, 5.0], 0.5, 0.5)]).to_string(),
        10,
        10,
        0.35,
        0.25,
    )
    .unwrap();
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["crop_box"], json!([0, 0, 5, 5]));
    assert_eq!(v["area_ratio"], 0.25);

    let v: Value = serde_json::from_str(&contextcrop_web::dmos_report(RATINGS, "", 0.7, "t").unwrap()).unwrap();
    assert_eq!(v["status"], "complete");
    assert_eq!(v["report"]["session_dmos"]["s"], 0.75);
    let partial: String = RATINGS.lines().take(3).collect::<Vec<_>>().join("\n");
    let v: Value = serde_json::from_str(&contextcrop_web::dmos_report(&partial, "", 0.7, "t").unwrap()).unwrap();
    assert_eq!(v["status"], "incomplete");
}
