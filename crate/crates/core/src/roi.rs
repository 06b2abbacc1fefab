//! Crop decision and execution. All grounded boxes are merged into their hull,
//! the hull is clamped to the frame and cut out. Whenever anything is missing
//! or fails, the original bytes are passed through untouched.

use std::borrow::Cow;
use std::io::Cursor;

use image::ImageFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::ImageItem;
use crate::geometry::PixelBox;
pub use crate::geometry::{area_ratio, box_area, clamp_box, union_boxes};
use crate::grounding::Detection;

#[derive(Debug, Error)]
pub enum CropError {
    #[error("cannot decode image: {0}")]
    Decode(#[source] image::ImageError),
    #[error("cannot encode image: {0}")]
    Encode(#[source] image::ImageError),
    #[error("crop box {crop:?} exceeds the {width}x{height} image")]
    OutOfBounds { crop: PixelBox, width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementStatus {
    Cropped,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementReason {
    Ok,
    NoContext,
    NoKeywords,
    NoDetections,
    BackendError,
    DegenerateUnion,
    /// The image could not be decoded or re-encoded.
    ImageError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub image_id: String,
    pub status: RefinementStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<PixelBox>,
    pub area_ratio: f64,
    pub reason: RefinementReason,
    pub width: u32,
    pub height: u32,
}

impl RefinementResult {
    pub fn unchanged(image: &ImageItem, reason: RefinementReason) -> Self {
        RefinementResult {
            image_id: image.image_id.clone(),
            status: RefinementStatus::Unchanged,
            crop_box: None,
            area_ratio: 1.0,
            reason,
            width: image.width,
            height: image.height,
        }
    }

    pub fn is_cropped(&self) -> bool {
        self.status == RefinementStatus::Cropped
    }

    /// Dimensions of the output image.
    pub fn output_dims(&self) -> (u32, u32) {
        match self.crop_box {
            Some(b) => (b.width(), b.height()),
            None => (self.width, self.height),
        }
    }
}

/// Outcome of [`refine_image`]: the decision and the bytes to store.
#[derive(Debug, Clone)]
pub struct Refined<'a> {
    pub result: RefinementResult,
    pub bytes: Cow<'a, [u8]>,
}

/// Cuts `b` out of an encoded image and re-encodes it in the source format.
pub fn crop_image(bytes: &[u8], b: &PixelBox) -> Result<Vec<u8>, CropError> {
    let format = image::guess_format(bytes).map_err(CropError::Decode)?;
    let img = image::load_from_memory_with_format(bytes, format).map_err(CropError::Decode)?;
    if !b.fits_in(img.width(), img.height()) {
        return Err(CropError::OutOfBounds {
            crop: *b,
            width: img.width(),
            height: img.height(),
        });
    }
    let cropped = img.crop_imm(b.x_min(), b.y_min(), b.width(), b.height());
    let mut out = Cursor::new(Vec::new());
    cropped.write_to(&mut out, format).map_err(CropError::Encode)?;
    Ok(out.into_inner())
}

/// Format of an encoded image, as a lowercase file extension.
pub fn image_extension(bytes: &[u8]) -> Option<&'static str> {
    image::guess_format(bytes)
        .ok()
        .and_then(|f| f.extensions_str().first().copied())
        .map(|e| if e == "jpeg" { "jpg" } else { e })
}

/// Width and height read from the image header, for PNG and JPEG input.
pub fn image_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    let format = image::guess_format(bytes).ok().filter(|f| is_supported(*f))?;
    image::ImageReader::with_format(Cursor::new(bytes), format)
        .into_dimensions()
        .ok()
}

fn is_supported(format: ImageFormat) -> bool {
    matches!(format, ImageFormat::Png | ImageFormat::Jpeg)
}

/// The box a set of detections would crop a `width` x `height` frame to, or
/// the reason the frame should be kept whole.
pub fn crop_plan(
    image_id: &str,
    detections: &[Detection],
    width: u32,
    height: u32,
) -> Result<PixelBox, RefinementReason> {
    let boxes: Vec<PixelBox> = detections.iter().map(|d| d.bbox).collect();
    let hull = union_boxes(&boxes).map_err(|_| RefinementReason::NoDetections)?;
    clamp_box(hull, width, height).map_err(|e| {
        log::warn!("image {image_id}: {e}");
        RefinementReason::DegenerateUnion
    })
}

/// Applies the crop decision for one image.
///
/// `upstream` carries a reason the caller already decided to leave the image
/// alone (no context, no keywords, backend failure); detections are ignored then.
pub fn refine_image<'a>(
    image: &ImageItem,
    bytes: &'a [u8],
    detections: &[Detection],
    upstream: Option<RefinementReason>,
) -> Refined<'a> {
    let keep = |reason| Refined {
        result: RefinementResult::unchanged(image, reason),
        bytes: Cow::Borrowed(bytes),
    };
    if let Some(reason) = upstream.filter(|r| *r != RefinementReason::Ok) {
        return keep(reason);
    }
    let crop = match crop_plan(&image.image_id, detections, image.width, image.height) {
        Ok(c) => c,
        Err(reason) => return keep(reason),
    };
    if !image::guess_format(bytes).is_ok_and(is_supported) {
        log::warn!("image {}: unsupported or unrecognized format", image.image_id);
        return keep(RefinementReason::ImageError);
    }
    match crop_image(bytes, &crop) {
        Ok(out) => Refined {
            result: RefinementResult {
                image_id: image.image_id.clone(),
                status: RefinementStatus::Cropped,
                crop_box: Some(crop),
                area_ratio: area_ratio(&crop, image.width, image.height),
                reason: RefinementReason::Ok,
                width: image.width,
                height: image.height,
            },
            bytes: Cow::Owned(out),
        },
        Err(e) => {
            log::warn!("image {}: {e}", image.image_id);
            keep(RefinementReason::ImageError)
        }
    }
}
