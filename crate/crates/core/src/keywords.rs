//! Keyword extraction: render the extraction prompt over a context window, ask a
//! text-generation backend, and normalize its reply into at most `max` grounding
//! phrases. An optional lexicon extractor stands in when the backend is down.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, RetryPolicy, TextGenBackend};
use crate::context::ContextWindow;

pub const DEFAULT_MAX_KEYWORDS: usize = 5;
pub const DEFAULT_TARGET_LANGUAGE: &str = "English";

const DEFAULT_TEMPLATE: &str = include_str!("../assets/keyword_prompt.v1.txt");
const DEFAULT_TEMPLATE_VERSION: &str = "keyword-prompt/v1";
const SEED_LEXICON: &str = include_str!("../assets/lexicon.txt");

const PLACEHOLDERS: [&str; 3] = ["{{conversation}}", "{{max_keywords}}", "{{target_language}}"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordSource {
    Backend,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    pub keywords: Vec<String>,
    pub source: KeywordSource,
}

impl KeywordList {
    pub fn empty(source: KeywordSource) -> Self {
        KeywordList {
            keywords: Vec::new(),
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub body: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            version: DEFAULT_TEMPLATE_VERSION.to_string(),
            body: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(version: impl Into<String>, body: impl Into<String>) -> io::Result<Self> {
        let body = body.into();
        if let Some(missing) = PLACEHOLDERS.iter().find(|p| !body.contains(*p)) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("prompt template lacks placeholder {missing}"),
            ));
        }
        Ok(PromptTemplate {
            version: version.into(),
            body,
        })
    }

    /// Loads a template file; the version is taken from the file stem.
    pub fn load(path: &Path) -> io::Result<Self> {
        let version = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom")
            .to_string();
        PromptTemplate::new(version, fs::read_to_string(path)?)
    }

    pub fn render(&self, w: &ContextWindow, max_keywords: usize, target_language: &str) -> PromptText {
        let conversation = w
            .entries
            .iter()
            .map(|e| format!("{}: \"{}\"", e.role, e.text))
            .collect::<Vec<_>>()
            .join("\n");
        // conversation goes in last so that entry text is never treated as a placeholder
        let body = self
            .body
            .replace("{{max_keywords}}", &max_keywords.to_string())
            .replace("{{target_language}}", target_language)
            .replace("{{conversation}}", &conversation);
        PromptText { body }
    }
}

/// Renders the default template with the default limits.
pub fn render_prompt(w: &ContextWindow) -> PromptText {
    PromptTemplate::default().render(w, DEFAULT_MAX_KEYWORDS, DEFAULT_TARGET_LANGUAGE)
}

fn is_quote(c: char) -> bool {
    matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’' | '「' | '」' | '『' | '』')
}

fn strip_wrapping(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || is_quote(c))
}

/// Splits a backend reply into normalized keywords.
///
/// Separators are commas (ASCII, full-width, ideographic) and newlines.
/// Duplicates are removed case-insensitively, keeping the first spelling.
pub fn parse_keywords(raw: &str, max: usize) -> KeywordList {
    let mut seen = HashSet::new();
    let keywords = raw
        .split([',', '，', '、', '\n', '\r'])
        .map(strip_wrapping)
        .filter(|k| !k.is_empty())
        .filter(|k| seen.insert(k.to_lowercase()))
        .take(max)
        .map(str::to_string)
        .collect();
    KeywordList {
        keywords,
        source: KeywordSource::Backend,
    }
}

/// Case-insensitive, longest-match term spotter over the window text.
#[derive(Debug, Clone)]
pub struct Lexicon {
    // lowercased, longest first
    terms: Vec<Vec<char>>,
}

fn fold(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut terms: Vec<Vec<char>> = terms
            .into_iter()
            .map(|t| strip_wrapping(t.as_ref()).chars().map(fold).collect::<Vec<_>>())
            .filter(|t| !t.is_empty())
            .filter(|t| seen.insert(t.clone()))
            .collect();
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Lexicon { terms }
    }

    /// One term per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        Lexicon::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn seed() -> Self {
        Lexicon::parse(SEED_LEXICON)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Lexicon::parse(&fs::read_to_string(path)?))
    }

    /// The normalized terms, longest first.
    pub fn terms(&self) -> impl Iterator<Item = String> + '_ {
        self.terms.iter().map(|t| t.iter().collect())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms mentioned in the window, most recent mention first, spelled as in the window.
    pub fn extract(&self, w: &ContextWindow, max: usize) -> Vec<String> {
        let text: Vec<char> = w.texts().collect::<Vec<_>>().join("\n").chars().collect();
        let folded: Vec<char> = text.iter().copied().map(fold).collect();
        let word = |c: char| c.is_ascii_alphanumeric();

        let mut hits: Vec<(usize, String)> = Vec::new();
        let mut i = 0;
        while i < folded.len() {
            let matched = self.terms.iter().find(|term| {
                let end = i + term.len();
                end <= folded.len()
                    && folded[i..end] == term[..]
                    && !(i > 0 && word(folded[i - 1]) && word(term[0]))
                    && !(end < folded.len() && word(folded[end]) && word(term[term.len() - 1]))
            });
            match matched {
                Some(term) => {
                    hits.push((i, text[i..i + term.len()].iter().collect()));
                    i += term.len();
                }
                None => i += 1,
            }
        }

        let mut seen = HashSet::new();
        hits.iter()
            .rev()
            .filter(|(_, s)| seen.insert(s.to_lowercase()))
            .take(max)
            .map(|(_, s)| s.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct KeywordConfig {
    pub max_keywords: usize,
    pub target_language: String,
    pub retry: RetryPolicy,
    pub template: PromptTemplate,
    /// When set, used if the backend fails or yields nothing.
    pub lexicon: Option<Lexicon>,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        KeywordConfig {
            max_keywords: DEFAULT_MAX_KEYWORDS,
            target_language: DEFAULT_TARGET_LANGUAGE.to_string(),
            retry: RetryPolicy::default(),
            template: PromptTemplate::default(),
            lexicon: None,
        }
    }
}

/// Keywords plus the backend error that forced a fallback, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub keywords: KeywordList,
    pub backend_error: Option<BackendError>,
}

#[derive(Clone)]
pub struct KeywordExtractor {
    backend: Arc<dyn TextGenBackend>,
    config: KeywordConfig,
}

impl KeywordExtractor {
    pub fn new(backend: Arc<dyn TextGenBackend>, config: KeywordConfig) -> Self {
        KeywordExtractor { backend, config }
    }

    pub fn config(&self) -> &KeywordConfig {
        &self.config
    }

    pub fn render(&self, w: &ContextWindow) -> PromptText {
        self.config
            .template
            .render(w, self.config.max_keywords, &self.config.target_language)
    }

    pub fn extract(&self, w: &ContextWindow) -> Extraction {
        if w.is_empty() {
            return Extraction {
                keywords: KeywordList::empty(KeywordSource::Backend),
                backend_error: None,
            };
        }
        let prompt = self.render(w);
        let (parsed, backend_error) = match self.config.retry.run(|| self.backend.complete(&prompt.body)) {
            Ok(reply) => (parse_keywords(&reply, self.config.max_keywords), None),
            Err(e) => {
                log::warn!("keyword backend failed for image {}: {e}", w.image_id);
                (KeywordList::empty(KeywordSource::Fallback), Some(e))
            }
        };
        if !parsed.is_empty() {
            return Extraction {
                keywords: parsed,
                backend_error,
            };
        }
        let fallback = self
            .config
            .lexicon
            .as_ref()
            .map(|lex| lex.extract(w, self.config.max_keywords))
            .unwrap_or_default();
        Extraction {
            keywords: KeywordList {
                keywords: fallback,
                source: KeywordSource::Fallback,
            },
            backend_error,
        }
    }
}

/// One-shot convenience over [`KeywordExtractor`].
pub fn extract_keywords(w: &ContextWindow, backend: Arc<dyn TextGenBackend>, config: KeywordConfig) -> KeywordList {
    KeywordExtractor::new(backend, config).extract(w).keywords
}
