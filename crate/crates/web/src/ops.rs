//! The exported operations as ordinary Rust functions.

use contextcrop_core::assessment::{build_report, parse_ratings, AssessmentError, MetricReport, MissingRating};
use contextcrop_core::backend::{GroundingResponse, RawDetection};
use contextcrop_core::context::{extract_context, ContextWindow};
use contextcrop_core::dialogue::{parse_dataset_str, ImageItem};
use contextcrop_core::grounding::{select_detections, Detection, GroundingConfig};
use contextcrop_core::pipeline::{ratio_histogram, read_provenance, Population, RatioHistogram};
use contextcrop_core::roi::{area_ratio, crop_plan, RefinementReason, RefinementStatus};
use contextcrop_core::PixelBox;
use serde::{Deserialize, Serialize};

/// Either a bare detection list or a full grounding response.
#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionsInput {
    List(Vec<RawDetection>),
    Response(GroundingResponse),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropPreview {
    pub status: RefinementStatus,
    pub reason: RefinementReason,
    pub crop_box: Option<PixelBox>,
    pub area_ratio: f64,
    pub kept: Vec<Detection>,
    /// Detections removed by the thresholds or lying outside the frame.
    pub dropped: usize,
}

pub fn preview_crop(
    detections_json: &str,
    width: u32,
    height: u32,
    box_threshold: f64,
    text_threshold: f64,
) -> Result<CropPreview, String> {
    if width == 0 || height == 0 {
        return Err(format!("frame must be non-empty, got {width}x{height}"));
    }
    let config = GroundingConfig::new(box_threshold, text_threshold).map_err(|e| e.to_string())?;
    let raw = match serde_json::from_str(detections_json).map_err(|e| format!("detections: {e}"))? {
        DetectionsInput::List(list) => list,
        DetectionsInput::Response(r) => r.detections,
    };
    let total = raw.len();
    let frame = ImageItem::new("preview", "preview", width, height);
    let kept = select_detections(raw, &config, &frame);
    let dropped = total - kept.len();
    Ok(match crop_plan(&frame.image_id, &kept, width, height) {
        Ok(b) => CropPreview {
            status: RefinementStatus::Cropped,
            reason: RefinementReason::Ok,
            crop_box: Some(b),
            area_ratio: area_ratio(&b, width, height),
            kept,
            dropped,
        },
        Err(reason) => CropPreview {
            status: RefinementStatus::Unchanged,
            reason,
            crop_box: None,
            area_ratio: 1.0,
            kept,
            dropped,
        },
    })
}

pub fn context_window(
    dataset_jsonl: &str,
    session_id: &str,
    image_id: &str,
    max_turns: usize,
) -> Result<ContextWindow, String> {
    let dataset = parse_dataset_str(dataset_jsonl).map_err(|e| e.to_string())?;
    let session = dataset
        .session(session_id)
        .ok_or_else(|| format!("no session `{session_id}` in the dataset"))?;
    extract_context(session, image_id, max_turns).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReportOutcome {
    Complete {
        report: Box<MetricReport>,
        /// Plain-text table of the report.
        table: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        histogram: Option<RatioHistogram>,
    },
    Incomplete {
        missing: Vec<MissingRating>,
    },
}

pub fn dmos_report(
    ratings_jsonl: &str,
    provenance_jsonl: &str,
    cutoff: f64,
    test: &str,
) -> Result<ReportOutcome, String> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(format!("cutoff must lie in (0, 1], got {cutoff}"));
    }
    let method = test.parse()?;
    let ratings = parse_ratings(ratings_jsonl.as_bytes()).map_err(|e| e.to_string())?;
    let provenance = if provenance_jsonl.trim().is_empty() {
        None
    } else {
        Some(read_provenance(provenance_jsonl.as_bytes()).map_err(|e| e.to_string())?)
    };
    match build_report(&ratings, provenance.as_deref(), cutoff, method) {
        Ok(report) => Ok(ReportOutcome::Complete {
            table: report.to_string(),
            histogram: provenance.as_deref().map(|p| ratio_histogram(p, Population::AllImages)),
            report: Box::new(report),
        }),
        Err(AssessmentError::Incomplete { missing }) => Ok(ReportOutcome::Incomplete { missing }),
        Err(e) => Err(e.to_string()),
    }
}
