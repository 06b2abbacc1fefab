//! Pixel-space boxes. Origin is the top-left corner and boxes are half-open,
//! so a box covers columns `x_min..x_max` and rows `y_min..y_max`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) is empty")]
    Degenerate {
        x_min: i64,
        y_min: i64,
        x_max: i64,
        y_max: i64,
    },
    #[error("cannot take the union of zero boxes")]
    EmptyUnion,
    #[error("box coordinate is not finite")]
    NotFinite,
}

/// A non-empty, integer, non-negative box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl PixelBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, GeometryError> {
        if x_min < x_max && y_min < y_max {
            Ok(PixelBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(GeometryError::Degenerate {
                x_min: x_min.into(),
                y_min: y_min.into(),
                x_max: x_max.into(),
                y_max: y_max.into(),
            })
        }
    }

    pub fn full_frame(width: u32, height: u32) -> Result<Self, GeometryError> {
        PixelBox::new(0, 0, width, height)
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[u32; 4]> for PixelBox {
    type Error = GeometryError;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [u32; 4] {
    fn from(b: PixelBox) -> Self {
        b.to_array()
    }
}

/// A box as reported by a grounding backend: real-valued and possibly outside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RawBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RawBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        RawBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<[f64; 4]> for RawBox {
    fn from(v: [f64; 4]) -> Self {
        RawBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<RawBox> for [f64; 4] {
    fn from(b: RawBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl From<PixelBox> for RawBox {
    fn from(b: PixelBox) -> Self {
        RawBox::new(b.x_min.into(), b.y_min.into(), b.x_max.into(), b.y_max.into())
    }
}

pub fn box_area(b: &PixelBox) -> u64 {
    u64::from(b.width()) * u64::from(b.height())
}

/// Coordinate-wise hull of a non-empty set of boxes.
pub fn union_boxes(boxes: &[PixelBox]) -> Result<PixelBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyUnion)?;
    Ok(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}

/// Intersects `b` with the frame `[0, width) x [0, height)`.
///
/// Fractional coordinates are rounded outward (floor for minima, ceil for maxima)
/// so the pixel box never cuts into the reported region.
pub fn clamp_box(b: impl Into<RawBox>, width: u32, height: u32) -> Result<PixelBox, GeometryError> {
    let b = b.into();
    if ![b.x_min, b.y_min, b.x_max, b.y_max].iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NotFinite);
    }
    let clamp = |v: f64, hi: u32| -> i64 { v.clamp(0.0, f64::from(hi)) as i64 };
    let x_min = clamp(b.x_min.floor(), width);
    let y_min = clamp(b.y_min.floor(), height);
    let x_max = clamp(b.x_max.ceil(), width);
    let y_max = clamp(b.y_max.ceil(), height);
    if x_min < x_max && y_min < y_max {
        Ok(PixelBox {
            x_min: x_min as u32,
            y_min: y_min as u32,
            x_max: x_max as u32,
            y_max: y_max as u32,
        })
    } else {
        Err(GeometryError::Degenerate {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }
}

/// Fraction of the frame covered by `b`.
pub fn area_ratio(b: &PixelBox, width: u32, height: u32) -> f64 {
    box_area(b) as f64 / (f64::from(width) * f64::from(height))
}
