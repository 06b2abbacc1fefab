//! Offline backends that answer from canned responses on disk.
//!
//! Layout of a fixture directory:
//!
//! ```text
//! keywords.json            {"rules": [{"contains": "mosquito", "reply": "leg, swelling"}], "default": null}
//! grounding/<image_id>.json [{"phrases": ["leg", "swelling"], "detections": [...]}]
//! ```
//!
//! Keyword rules are tried in order; the first whose `contains` occurs in the prompt wins.
//! A grounding entry matches when its phrase set equals the requested one
//! (case-insensitive); an entry without `phrases` matches any request.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, GroundingBackend, GroundingRequest, GroundingResponse, RawDetection, TextGenBackend,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordRule {
    pub contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KeywordFixtures {
    #[serde(default)]
    pub rules: Vec<KeywordRule>,
    #[serde(default)]
    pub default: Option<String>,
}

#[derive(Debug, Default)]
pub struct FixtureTextGen {
    fixtures: KeywordFixtures,
    calls: AtomicUsize,
}

impl FixtureTextGen {
    pub fn new(fixtures: KeywordFixtures) -> Self {
        FixtureTextGen {
            fixtures,
            calls: AtomicUsize::new(0),
        }
    }

    /// Replies with `reply` to every prompt.
    pub fn constant(reply: impl Into<String>) -> Self {
        FixtureTextGen::new(KeywordFixtures {
            rules: Vec::new(),
            default: Some(reply.into()),
        })
    }

    pub fn load(dir: &Path) -> io::Result<Self> {
        let path = dir.join("keywords.json");
        let fixtures = match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => KeywordFixtures::default(),
            Err(e) => return Err(e),
        };
        Ok(FixtureTextGen::new(fixtures))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextGenBackend for FixtureTextGen {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.fixtures
            .rules
            .iter()
            .find(|r| prompt.contains(&r.contains))
            .map(|r| r.reply.clone())
            .or_else(|| self.fixtures.default.clone())
            .ok_or_else(|| BackendError::Fixture("no canned reply matches the prompt".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingFixture {
    #[serde(default)]
    pub phrases: Option<Vec<String>>,
    pub detections: Vec<RawDetection>,
}

#[derive(Debug, Default)]
pub struct FixtureGrounding {
    by_image: HashMap<String, Vec<GroundingFixture>>,
    calls: AtomicUsize,
}

fn phrase_key(phrases: &[String]) -> BTreeSet<String> {
    phrases.iter().map(|p| p.trim().to_lowercase()).collect()
}

impl FixtureGrounding {
    pub fn new(by_image: HashMap<String, Vec<GroundingFixture>>) -> Self {
        FixtureGrounding {
            by_image,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(dir: &Path) -> io::Result<Self> {
        let mut by_image = HashMap::new();
        let gdir = dir.join("grounding");
        if gdir.is_dir() {
            for entry in fs::read_dir(&gdir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let Some(image_id) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                let fixtures: Vec<GroundingFixture> = serde_json::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
                by_image.insert(image_id.to_string(), fixtures);
            }
        }
        Ok(FixtureGrounding::new(by_image))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GroundingBackend for FixtureGrounding {
    fn ground(&self, request: &GroundingRequest) -> Result<GroundingResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let wanted = phrase_key(&request.phrases);
        let detections = self
            .by_image
            .get(&request.image_id)
            .and_then(|entries| {
                entries.iter().find(|f| match &f.phrases {
                    Some(p) => phrase_key(p) == wanted,
                    None => true,
                })
            })
            .map(|f| f.detections.clone())
            .unwrap_or_default();
        Ok(GroundingResponse { detections })
    }
}
