//! End-to-end runs over the bundled fixture corpus.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use contextcrop_core::backend::RetryPolicy;
use contextcrop_core::dialogue::{parse_dataset, serialize_dataset_string, Dataset};
use contextcrop_core::fixtures::{FixtureGrounding, FixtureTextGen};
use contextcrop_core::keywords::{KeywordSource, Lexicon};
use contextcrop_core::pipeline::{
    ratio_histogram, read_provenance, refine_dataset, structural_diff, write_provenance, Backends, ImageDir,
    PipelineConfig, Population, ProvenanceRecord, Refiner, RunOutput,
};
use contextcrop_core::roi::{RefinementReason, RefinementStatus};
use contextcrop_core::PixelBox;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

fn copy_dir(from: &Path, to: &Path) {
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

struct Run {
    _tmp: tempfile::TempDir,
    images: PathBuf,
    dataset: Dataset,
    text: Arc<FixtureTextGen>,
    grounding: Arc<FixtureGrounding>,
    refiner: Refiner,
}

fn setup() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    copy_dir(&corpus().join("images"), &images);
    let dataset = parse_dataset(fs::read(corpus().join("dataset.jsonl")).unwrap().as_slice()).unwrap();
    let text = Arc::new(FixtureTextGen::load(&corpus().join("backends")).unwrap());
    let grounding = Arc::new(FixtureGrounding::load(&corpus().join("backends")).unwrap());
    let backends = Backends {
        lexicon: Some(Lexicon::seed()),
        retry: RetryPolicy {
            retries: 2,
            base_delay_ms: 0,
        },
        ..Backends::new(text.clone(), grounding.clone())
    };
    let refiner = Refiner::new(PipelineConfig::default(), backends).unwrap();
    Run {
        _tmp: tmp,
        images,
        dataset,
        text,
        grounding,
        refiner,
    }
}

fn run(r: &Run, previous: &[ProvenanceRecord]) -> RunOutput {
    refine_dataset(&r.dataset, &r.refiner, &ImageDir::new(&r.images), previous).unwrap()
}

fn by_id(records: &[ProvenanceRecord]) -> HashMap<&str, &ProvenanceRecord> {
    records.iter().map(|r| (r.image_id.as_str(), r)).collect()
}

#[test]
fn corpus_outcomes_match_hand_derivation() {
    let r = setup();
    let out = run(&r, &[]);
    assert_eq!(out.records.len(), 12);
    let recs = by_id(&out.records);

    let expect_crop = |id: &str, b: [u32; 4], ratio: f64| {
        let res = &recs[id].result;
        assert_eq!(res.status, RefinementStatus::Cropped, "{id}");
        assert_eq!(res.crop_box, Some(PixelBox::try_from(b).unwrap()), "{id}");
        assert!((res.area_ratio - ratio).abs() < 1e-12, "{id}: {}", res.area_ratio);
    };
    // boxes rounded outward, then hull of the kept detections
    expect_crop("d1", [20, 30, 111, 91], 91.0 * 61.0 / 19200.0);
    expect_crop("d2", [10, 10, 150, 110], 14000.0 / 19200.0);
    expect_crop("d4", [40, 20, 120, 100], 6400.0 / 19200.0);
    expect_crop("o2", [50, 20, 150, 80], 6000.0 / 20000.0);
    expect_crop("o4", [0, 0, 200, 100], 1.0);
    expect_crop("t1", [80, 100, 160, 170], 5600.0 / 43200.0);
    expect_crop("t3", [90, 90, 200, 180], 9900.0 / 43200.0);

    let expect_kept = |id: &str, reason: RefinementReason| {
        let res = &recs[id].result;
        assert_eq!(res.status, RefinementStatus::Unchanged, "{id}");
        assert_eq!(res.reason, reason, "{id}");
        assert_eq!(res.area_ratio, 1.0);
        assert_eq!(recs[id].output_uri, recs[id].source_uri);
    };
    expect_kept("d3", RefinementReason::NoDetections);
    expect_kept("o1", RefinementReason::NoContext);
    expect_kept("o3", RefinementReason::NoDetections);
    expect_kept("t2", RefinementReason::NoDetections);
    expect_kept("t4", RefinementReason::BackendError);

    assert_eq!(
        recs["d1"].keywords.keywords,
        ["Pregnancy", "legs", "red patches", "thighs", "right side"]
    );
    assert_eq!(recs["t3"].keywords.source, KeywordSource::Fallback);
    assert_eq!(recs["t3"].keywords.keywords, ["tongue"]);
    assert_eq!(recs["o1"].context_turns_used, 0);
    assert_eq!(recs["o4"].context_turns_used, 3);

    // o1 never reaches a backend, t4 never reaches grounding
    assert_eq!(r.grounding.calls(), 10);
    // 10 prompts answered plus t4's three failed attempts
    assert_eq!(r.text.calls(), 13);

    for rec in &out.records {
        let bytes = fs::read(r.images.join(&rec.output_uri)).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!(
            (img.width(), img.height()),
            rec.result.output_dims(),
            "{}",
            rec.image_id
        );
    }
}

#[test]
fn structure_is_preserved() {
    let r = setup();
    let out = run(&r, &[]);
    let diff = structural_diff(&r.dataset, &out.dataset);
    assert!(!diff.is_empty());
    assert!(diff.iter().all(|c| c.is_image_update()), "{diff:?}");
    assert_eq!(out.dataset.image_count(), out.records.len());

    let d1 = out.dataset.sessions[0].turns[3].items[1].as_image().unwrap();
    assert_eq!(d1.uri, "derm/d1.refined.png");
    assert_eq!((d1.width, d1.height), (91, 61));
    let o2 = out.dataset.sessions[1].turns[3].items[0].as_image().unwrap();
    assert_eq!(o2.extra["captured_with"], "phone");
    assert_eq!(out.dataset.sessions[1].extra["channel"], "app");

    let h = ratio_histogram(&out.records, Population::AllImages);
    assert_eq!(h.counts, [1, 4, 0, 1, 6]);
    assert_eq!(h.counts.iter().sum::<u64>(), 12);
    let h = ratio_histogram(&out.records, Population::CroppedOnly);
    assert_eq!(h.counts, [1, 4, 0, 1, 1]);
}

#[test]
fn runs_are_deterministic() {
    let strip = |o: &RunOutput| {
        let recs: Vec<_> = o.records.iter().map(ProvenanceRecord::without_timestamps).collect();
        let mut buf = Vec::new();
        write_provenance(&recs, &mut buf).unwrap();
        (serialize_dataset_string(&o.dataset), buf)
    };
    let a = setup();
    let b = setup();
    let oa = run(&a, &[]);
    let ob = run(&b, &[]);
    assert_eq!(strip(&oa), strip(&ob));
    for rec in oa.records.iter().filter(|r| r.result.is_cropped()) {
        assert_eq!(
            fs::read(a.images.join(&rec.output_uri)).unwrap(),
            fs::read(b.images.join(&rec.output_uri)).unwrap()
        );
    }
}

#[test]
fn rerun_resumes_from_provenance() {
    let r = setup();
    let first = run(&r, &[]);
    let (text_calls, ground_calls) = (r.text.calls(), r.grounding.calls());
    // resume from what a previous run wrote to disk
    let mut file = Vec::new();
    write_provenance(&first.records, &mut file).unwrap();
    let on_disk = read_provenance(file.as_slice()).unwrap();
    assert_eq!(on_disk, first.records);
    let second = run(&r, &on_disk);
    assert_eq!(second.resumed, 12);
    assert_eq!(r.text.calls(), text_calls);
    assert_eq!(r.grounding.calls(), ground_calls);
    assert_eq!(second.records, first.records);
    assert_eq!(second.dataset, first.dataset);

    // a missing refined file forces that image to be redone
    fs::remove_file(r.images.join("oph/o2.refined.png")).unwrap();
    let third = run(&r, &first.records);
    assert_eq!(third.resumed, 11);
    assert!(r.images.join("oph/o2.refined.png").is_file());

    // a different configuration invalidates every key
    let backends = Backends::new(r.text.clone(), r.grounding.clone());
    let other = Refiner::new(
        PipelineConfig {
            box_threshold: 0.5,
            ..PipelineConfig::default()
        },
        backends,
    )
    .unwrap();
    let fourth = refine_dataset(&r.dataset, &other, &ImageDir::new(&r.images), &first.records).unwrap();
    assert_eq!(fourth.resumed, 0);
}

#[test]
fn dataset_without_images_is_untouched() {
    let r = setup();
    let text_only = Dataset::new(vec![contextcrop_core::Session::new(
        "s",
        "d",
        vec![(
            contextcrop_core::Role::Patient,
            vec![contextcrop_core::ContentItem::text("hello")],
        )],
    )])
    .unwrap();
    let out = refine_dataset(&text_only, &r.refiner, &ImageDir::new(&r.images), &[]).unwrap();
    assert_eq!(out.dataset, text_only);
    assert!(out.records.is_empty());
}

#[test]
fn unreadable_image_only_affects_itself() {
    let r = setup();
    fs::remove_file(r.images.join("derm/d1.png")).unwrap();
    let out = run(&r, &[]);
    let recs = by_id(&out.records);
    assert_eq!(recs["d1"].result.reason, RefinementReason::ImageError);
    assert!(recs["d2"].result.is_cropped());
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden")
}

/// Compares against the frozen outputs; `UPDATE_GOLDEN=1` rewrites them.
#[test]
fn corpus_matches_golden_outputs() {
    let r = setup();
    let out = run(&r, &[]);
    let refined = serialize_dataset_string(&out.dataset);
    let mut provenance = Vec::new();
    let stripped: Vec<_> = out.records.iter().map(ProvenanceRecord::without_timestamps).collect();
    write_provenance(&stripped, &mut provenance).unwrap();
    let mut digests = String::new();
    for rec in out.records.iter().filter(|r| r.result.is_cropped()) {
        let bytes = fs::read(r.images.join(&rec.output_uri)).unwrap();
        digests.push_str(&format!(
            "{}  {}\n",
            contextcrop_core::pipeline::sha256_hex(&bytes),
            rec.output_uri
        ));
    }
    let files = [
        ("refined.jsonl", refined.into_bytes()),
        ("provenance.jsonl", provenance),
        ("images.sha256", digests.into_bytes()),
    ];
    let dir = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(&dir).unwrap();
        for (name, body) in &files {
            fs::write(dir.join(name), body).unwrap();
        }
    }
    for (name, body) in &files {
        let expected = fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(expected == *body, "{name} differs from the golden copy");
    }
}
