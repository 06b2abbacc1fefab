//! Preceding-text context for an image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{ContentItem, Role, Session};

pub const DEFAULT_CONTEXT_TURNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("image `{image_id}` not found in session `{session_id}`")]
    UnknownImage { session_id: String, image_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub role: Role,
    pub text: String,
    /// Turn the text came from; absent for context supplied outside a dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub image_id: String,
    /// Oldest first.
    pub entries: Vec<ContextEntry>,
    pub turns_used: usize,
}

impl ContextWindow {
    pub fn empty(image_id: impl Into<String>) -> Self {
        ContextWindow {
            image_id: image_id.into(),
            entries: Vec::new(),
            turns_used: 0,
        }
    }

    /// Builds a window from free-standing texts (oldest first), one turn per entry.
    pub fn from_entries(image_id: impl Into<String>, entries: Vec<ContextEntry>) -> Self {
        let turns_used = entries.len();
        ContextWindow {
            image_id: image_id.into(),
            entries,
            turns_used,
        }
    }

    /// Builds a window from supplied texts (oldest first), keeping the last
    /// `max_turns` turns. Entries sharing a `turn` number form one turn; entries
    /// without one each count as their own turn.
    pub fn trimmed(image_id: impl Into<String>, entries: Vec<ContextEntry>, max_turns: usize) -> Self {
        let mut groups: Vec<Vec<ContextEntry>> = Vec::new();
        for e in entries {
            match groups.last_mut() {
                Some(g) if e.turn.is_some() && g[0].turn == e.turn => g.push(e),
                _ => groups.push(vec![e]),
            }
        }
        let keep = groups.len().saturating_sub(max_turns);
        let kept: Vec<Vec<ContextEntry>> = groups.into_iter().skip(keep).collect();
        ContextWindow {
            image_id: image_id.into(),
            turns_used: kept.len(),
            entries: kept.into_iter().flatten().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }
}

/// Collects the text of the last `max_turns` text-bearing turns before the image.
///
/// Text items earlier in the image's own turn count as one turn. Turns with no
/// text do not consume the budget.
pub fn extract_context(session: &Session, image_id: &str, max_turns: usize) -> Result<ContextWindow, ContextError> {
    let (image_turn, image_item) = session
        .locate_image(image_id)
        .ok_or_else(|| ContextError::UnknownImage {
            session_id: session.session_id.clone(),
            image_id: image_id.to_string(),
        })?;

    let mut picked: Vec<Vec<ContextEntry>> = Vec::new();
    for ti in (0..=image_turn).rev() {
        if picked.len() == max_turns {
            break;
        }
        let turn = &session.turns[ti];
        let visible = if ti == image_turn {
            &turn.items[..image_item]
        } else {
            &turn.items[..]
        };
        let texts: Vec<ContextEntry> = visible
            .iter()
            .filter_map(ContentItem::as_text)
            .map(|text| ContextEntry {
                role: turn.role,
                text: text.to_string(),
                turn: Some(turn.index),
            })
            .collect();
        if !texts.is_empty() {
            picked.push(texts);
        }
    }

    let turns_used = picked.len();
    picked.reverse();
    Ok(ContextWindow {
        image_id: image_id.to_string(),
        entries: picked.into_iter().flatten().collect(),
        turns_used,
    })
}
