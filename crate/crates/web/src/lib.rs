//! Browser build of the refinement and assessment core.
//!
//! Three operations are exported to JavaScript. Each takes plain strings and
//! numbers and returns a JSON string, or throws a string describing bad input.
//!
//! | export           | input                                          | output                     |
//! |------------------|------------------------------------------------|----------------------------|
//! | `preview_crop`   | grounding detections, frame size, thresholds   | kept detections, crop box  |
//! | `context_window` | dataset JSONL, session id, image id, turn cap  | context window             |
//! | `dmos_report`    | ratings JSONL, optional provenance, cutoff     | report or missing ratings  |
//!
//! The same functions are callable natively through [`ops`], which is what the
//! tests exercise.

use wasm_bindgen::prelude::*;

pub mod ops;

/// Filters raw detections for a `width` x `height` frame and plans the crop.
#[wasm_bindgen]
pub fn preview_crop(
    detections_json: &str,
    width: u32,
    height: u32,
    box_threshold: f64,
    text_threshold: f64,
) -> Result<String, String> {
    let preview = ops::preview_crop(detections_json, width, height, box_threshold, text_threshold)?;
    Ok(to_json(&preview))
}

/// Text context preceding `image_id` in one session of a dataset.
#[wasm_bindgen]
pub fn context_window(dataset_jsonl: &str, session_id: &str, image_id: &str, max_turns: u32) -> Result<String, String> {
    let window = ops::context_window(dataset_jsonl, session_id, image_id, max_turns as usize)?;
    Ok(to_json(&window))
}

/// DMOS and MOS over a ratings file. `provenance_jsonl` may be empty, in which
/// case the cropped-image figures and the area ratio histogram are omitted.
#[wasm_bindgen]
pub fn dmos_report(ratings_jsonl: &str, provenance_jsonl: &str, cutoff: f64, test: &str) -> Result<String, String> {
    let outcome = ops::dmos_report(ratings_jsonl, provenance_jsonl, cutoff, test)?;
    Ok(to_json(&outcome))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report types serialize")
}
