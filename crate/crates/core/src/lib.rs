//! Context-driven region-of-interest refinement for multi-turn multimodal
//! dialogue datasets.
//!
//! For every image a patient sends, the text that precedes it is summarized
//! into a handful of keywords, a zero-shot grounding model locates those
//! keywords in the image, and the image is replaced in place by the hull of the
//! grounded boxes. When any step comes up empty the image is left untouched.
//!
//! The [`assessment`] module scores the effect with double-stimulus ratings,
//! reporting DMOS at several aggregation levels alongside MOS.

pub mod assessment;
pub mod backend;
pub mod context;
pub mod dialogue;
pub mod fixtures;
pub mod geometry;
pub mod grounding;
pub mod keywords;
pub mod pipeline;
pub mod roi;

pub use dialogue::{parse_dataset, serialize_dataset, ContentItem, Dataset, ImageItem, Role, Session, Turn};
pub use geometry::{box_area, PixelBox, RawBox};
pub use pipeline::{refine_dataset, Backends, PipelineConfig, ProvenanceRecord, Refiner};
pub use roi::{RefinementReason, RefinementResult, RefinementStatus};
