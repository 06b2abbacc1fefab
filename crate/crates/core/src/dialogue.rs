//! Multi-turn multimodal dialogue sessions and their line-delimited record format.
//!
//! One session per line:
//!
//! ```text
//! {"session_id":"s1","department":"dermatology","turns":[{"index":0,"role":"patient",
//!   "items":[{"type":"text","body":"..."},{"type":"image","image_id":"i1","uri":"i1.png","width":640,"height":480}]}]}
//! ```
//!
//! Fields this crate does not know about are kept in `extra` maps and written back out.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record at `{path}`: {message}")]
    Malformed { line: usize, path: String, message: String },
    #[error("line {line}: invalid value at `{path}`: {message}")]
    Invalid { line: usize, path: String, message: String },
    #[error("line {line}: duplicate session_id `{session_id}`")]
    DuplicateSession { line: usize, session_id: String },
    #[error("line {line}: duplicate image_id `{image_id}`")]
    DuplicateImage { line: usize, image_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    /// Line number (1-based) the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Malformed { line, .. }
            | DatasetError::Invalid { line, .. }
            | DatasetError::DuplicateSession { line, .. }
            | DatasetError::DuplicateImage { line, .. } => Some(*line),
            DatasetError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub body: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ImageItem {
    pub fn new(image_id: impl Into<String>, uri: impl Into<String>, width: u32, height: u32) -> Self {
        ImageItem {
            image_id: image_id.into(),
            uri: uri.into(),
            width,
            height,
            extra: Map::new(),
        }
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentItem {
    Text(TextItem),
    Image(ImageItem),
}

impl ContentItem {
    pub fn text(body: impl Into<String>) -> Self {
        ContentItem::Text(TextItem {
            body: body.into(),
            extra: Map::new(),
        })
    }

    pub fn image(image_id: impl Into<String>, uri: impl Into<String>, width: u32, height: u32) -> Self {
        ContentItem::Image(ImageItem::new(image_id, uri, width, height))
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ContentItem::Text(t) => Some(&t.body),
            ContentItem::Image(_) => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageItem> {
        match self {
            ContentItem::Image(i) => Some(i),
            ContentItem::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    pub items: Vec<ContentItem>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Turn {
    pub fn new(index: usize, role: Role, items: Vec<ContentItem>) -> Self {
        Turn {
            index,
            role,
            items,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub department: String,
    pub turns: Vec<Turn>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Session {
    /// Builds a session, numbering turns in order.
    pub fn new(
        session_id: impl Into<String>,
        department: impl Into<String>,
        turns: Vec<(Role, Vec<ContentItem>)>,
    ) -> Self {
        Session {
            session_id: session_id.into(),
            department: department.into(),
            turns: turns
                .into_iter()
                .enumerate()
                .map(|(i, (role, items))| Turn::new(i, role, items))
                .collect(),
            extra: Map::new(),
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageItem> {
        self.turns
            .iter()
            .flat_map(|t| t.items.iter())
            .filter_map(ContentItem::as_image)
    }

    /// (turn index, item index) of the image, if present.
    pub fn locate_image(&self, image_id: &str) -> Option<(usize, usize)> {
        self.turns.iter().enumerate().find_map(|(ti, turn)| {
            turn.items
                .iter()
                .position(|item| matches!(item, ContentItem::Image(img) if img.image_id == image_id))
                .map(|ii| (ti, ii))
        })
    }

    /// Checks the per-session invariants. `line` is only used for error reporting.
    pub fn validate(&self, line: usize) -> Result<(), DatasetError> {
        let invalid = |path: String, message: &str| DatasetError::Invalid {
            line,
            path,
            message: message.to_string(),
        };
        if self.session_id.is_empty() {
            return Err(invalid("session_id".into(), "must be non-empty"));
        }
        if self.turns.is_empty() {
            return Err(invalid("turns".into(), "a session needs at least one turn"));
        }
        for (ti, turn) in self.turns.iter().enumerate() {
            if turn.index != ti {
                return Err(invalid(
                    format!("turns[{ti}].index"),
                    &format!("expected {ti}, found {}", turn.index),
                ));
            }
            if turn.items.is_empty() {
                return Err(invalid(format!("turns[{ti}].items"), "a turn needs at least one item"));
            }
            for (ii, item) in turn.items.iter().enumerate() {
                match item {
                    ContentItem::Text(t) if t.body.is_empty() => {
                        return Err(invalid(format!("turns[{ti}].items[{ii}].body"), "must be non-empty"));
                    }
                    ContentItem::Image(img) => {
                        if img.image_id.is_empty() {
                            return Err(invalid(
                                format!("turns[{ti}].items[{ii}].image_id"),
                                "must be non-empty",
                            ));
                        }
                        if img.width == 0 {
                            return Err(invalid(format!("turns[{ti}].items[{ii}].width"), "must be > 0"));
                        }
                        if img.height == 0 {
                            return Err(invalid(format!("turns[{ti}].items[{ii}].height"), "must be > 0"));
                        }
                    }
                    ContentItem::Text(_) => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sessions: Vec<Session>,
}

/// Position of an image inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSlot {
    pub session: usize,
    pub turn: usize,
    pub item: usize,
}

impl Dataset {
    /// Validates and wraps a list of sessions.
    pub fn new(sessions: Vec<Session>) -> Result<Self, DatasetError> {
        let mut seen_sessions = HashSet::new();
        let mut seen_images = HashSet::new();
        for (i, s) in sessions.iter().enumerate() {
            check_session(s, i + 1, &mut seen_sessions, &mut seen_images)?;
        }
        Ok(Dataset { sessions })
    }

    pub fn image_slots(&self) -> Vec<ImageSlot> {
        let mut slots = Vec::new();
        for (si, s) in self.sessions.iter().enumerate() {
            for (ti, t) in s.turns.iter().enumerate() {
                for (ii, item) in t.items.iter().enumerate() {
                    if item.as_image().is_some() {
                        slots.push(ImageSlot {
                            session: si,
                            turn: ti,
                            item: ii,
                        });
                    }
                }
            }
        }
        slots
    }

    pub fn image_at(&self, slot: ImageSlot) -> &ImageItem {
        self.sessions[slot.session].turns[slot.turn].items[slot.item]
            .as_image()
            .expect("slot points at an image item")
    }

    pub fn image_count(&self) -> usize {
        self.sessions.iter().map(|s| s.images().count()).sum()
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.session_id == session_id)
    }
}

fn check_session(
    s: &Session,
    line: usize,
    seen_sessions: &mut HashSet<String>,
    seen_images: &mut HashSet<String>,
) -> Result<(), DatasetError> {
    s.validate(line)?;
    if !seen_sessions.insert(s.session_id.clone()) {
        return Err(DatasetError::DuplicateSession {
            line,
            session_id: s.session_id.clone(),
        });
    }
    for img in s.images() {
        if !seen_images.insert(img.image_id.clone()) {
            return Err(DatasetError::DuplicateImage {
                line,
                image_id: img.image_id.clone(),
            });
        }
    }
    Ok(())
}

/// Reads one session per line. Blank lines are ignored.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset, DatasetError> {
    let mut sessions = Vec::new();
    let mut seen_sessions = HashSet::new();
    let mut seen_images = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let session: Session = serde_path_to_error::deserialize(de).map_err(|e| DatasetError::Malformed {
            line: line_no,
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        check_session(&session, line_no, &mut seen_sessions, &mut seen_images)?;
        sessions.push(session);
    }
    Ok(Dataset { sessions })
}

pub fn parse_dataset_str(input: &str) -> Result<Dataset, DatasetError> {
    parse_dataset(input.as_bytes())
}

/// Writes one session per line, in dataset order.
pub fn serialize_dataset<W: Write>(d: &Dataset, mut writer: W) -> std::io::Result<()> {
    for s in &d.sessions {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn serialize_dataset_string(d: &Dataset) -> String {
    let mut buf = Vec::new();
    serialize_dataset(d, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
