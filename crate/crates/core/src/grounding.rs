//! Zero-shot grounding: ask the backend where the keywords are, keep confident
//! detections, and bring their boxes into the image frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GroundingBackend, GroundingRequest, RawDetection, RetryPolicy};
use crate::dialogue::ImageItem;
use crate::geometry::{clamp_box, PixelBox};
use crate::keywords::KeywordList;

pub const DEFAULT_BOX_THRESHOLD: f64 = 0.35;
pub const DEFAULT_TEXT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundError {
    #[error("grounding needs at least one keyword")]
    NoKeywords,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            box_threshold: DEFAULT_BOX_THRESHOLD,
            text_threshold: DEFAULT_TEXT_THRESHOLD,
        }
    }
}

impl GroundingConfig {
    pub fn new(box_threshold: f64, text_threshold: f64) -> Result<Self, GroundError> {
        for t in [box_threshold, text_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(GroundError::BadThreshold(t));
            }
        }
        Ok(GroundingConfig {
            box_threshold,
            text_threshold,
        })
    }
}

/// A detection whose box lies inside the image frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub phrase: String,
    pub box_score: f64,
    pub phrase_score: f64,
}

pub trait Scored {
    fn box_score(&self) -> f64;
    fn phrase_score(&self) -> f64;
}

impl Scored for Detection {
    fn box_score(&self) -> f64 {
        self.box_score
    }
    fn phrase_score(&self) -> f64 {
        self.phrase_score
    }
}

impl Scored for RawDetection {
    fn box_score(&self) -> f64 {
        self.box_score
    }
    fn phrase_score(&self) -> f64 {
        self.phrase_score
    }
}

/// Keeps detections scoring at or above both thresholds, in order.
pub fn filter_detections<D: Scored + Clone>(raw: &[D], cfg: &GroundingConfig) -> Vec<D> {
    raw.iter()
        .filter(|d| d.box_score() >= cfg.box_threshold && d.phrase_score() >= cfg.text_threshold)
        .cloned()
        .collect()
}

fn score_ok(s: f64) -> bool {
    (0.0..=1.0).contains(&s)
}

#[derive(Clone)]
pub struct Grounder {
    backend: Arc<dyn GroundingBackend>,
    config: GroundingConfig,
    retry: RetryPolicy,
}

impl Grounder {
    pub fn new(backend: Arc<dyn GroundingBackend>, config: GroundingConfig, retry: RetryPolicy) -> Self {
        Grounder { backend, config, retry }
    }

    pub fn config(&self) -> &GroundingConfig {
        &self.config
    }

    /// One backend call (plus retries), then [`select_detections`].
    pub fn ground(
        &self,
        image: &ImageItem,
        bytes: &[u8],
        keywords: &KeywordList,
    ) -> Result<Vec<Detection>, GroundError> {
        if keywords.is_empty() {
            return Err(GroundError::NoKeywords);
        }
        let request = GroundingRequest {
            image_id: image.image_id.clone(),
            image: bytes.to_vec(),
            caption: GroundingRequest::caption_for(&keywords.keywords),
            phrases: keywords.keywords.clone(),
            box_threshold: self.config.box_threshold,
            text_threshold: self.config.text_threshold,
        };
        let response = self.retry.run(|| self.backend.ground(&request)).inspect_err(|e| {
            log::warn!("grounding backend failed for image {}: {e}", image.image_id);
        })?;

        Ok(select_detections(response.detections, &self.config, image))
    }
}

/// Turns raw backend output into usable detections for `image`.
///
/// Detections with invalid scores, scores below either threshold, or a box
/// that falls entirely outside the frame are dropped. Survivors keep their
/// order and have their boxes clamped to the frame.
pub fn select_detections(raw: Vec<RawDetection>, cfg: &GroundingConfig, image: &ImageItem) -> Vec<Detection> {
    let valid: Vec<RawDetection> = raw
        .into_iter()
        .filter(|d| {
            let ok = score_ok(d.box_score) && score_ok(d.phrase_score);
            if !ok {
                log::warn!("image {}: dropping detection with out-of-range score", image.image_id);
            }
            ok
        })
        .collect();
    filter_detections(&valid, cfg)
        .into_iter()
        .filter_map(|d| match clamp_box(d.bbox, image.width, image.height) {
            Ok(bbox) => Some(Detection {
                bbox,
                phrase: d.phrase,
                box_score: d.box_score,
                phrase_score: d.phrase_score,
            }),
            Err(e) => {
                log::warn!("image {}: dropping detection for `{}`: {e}", image.image_id, d.phrase);
                None
            }
        })
        .collect()
}
