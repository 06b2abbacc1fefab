//! Dataset-level refinement. Every image goes through the per-image steps on a
//! bounded worker pool, and results are collected back in dataset order.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{GroundingBackend, RetryPolicy, TextGenBackend};
use crate::context::{extract_context, ContextWindow, DEFAULT_CONTEXT_TURNS};
use crate::dialogue::{ContentItem, Dataset, ImageItem, ImageSlot, Session};
use crate::grounding::{
    Detection, GroundError, Grounder, GroundingConfig, DEFAULT_BOX_THRESHOLD, DEFAULT_TEXT_THRESHOLD,
};
use crate::keywords::{
    KeywordConfig, KeywordExtractor, KeywordList, KeywordSource, Lexicon, PromptTemplate, DEFAULT_MAX_KEYWORDS,
    DEFAULT_TARGET_LANGUAGE,
};
use crate::roi::{refine_image, Refined, RefinementReason, RefinementResult, RefinementStatus};

pub const DEFAULT_CROP_CUTOFF: f64 = 0.7;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("provenance line {line}: {message}")]
    Provenance { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_keywords: usize,
    pub context_turns: usize,
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub crop_cutoff: f64,
    pub max_in_flight: usize,
    pub target_language: String,
    pub kw_endpoint: Option<String>,
    pub ground_endpoint: Option<String>,
    pub kw_timeout_ms: u64,
    pub kw_retries: u32,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_keywords: DEFAULT_MAX_KEYWORDS,
            context_turns: DEFAULT_CONTEXT_TURNS,
            box_threshold: DEFAULT_BOX_THRESHOLD,
            text_threshold: DEFAULT_TEXT_THRESHOLD,
            crop_cutoff: DEFAULT_CROP_CUTOFF,
            max_in_flight: 4,
            target_language: DEFAULT_TARGET_LANGUAGE.to_string(),
            kw_endpoint: None,
            ground_endpoint: None,
            kw_timeout_ms: 30_000,
            kw_retries: RetryPolicy::default().retries,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (name, v) in [
            ("box_threshold", self.box_threshold),
            ("text_threshold", self.text_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.crop_cutoff > 0.0 && self.crop_cutoff <= 1.0) {
            return bad(format!("crop_cutoff must lie in (0, 1], got {}", self.crop_cutoff));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        Ok(())
    }

    pub fn grounding(&self) -> GroundingConfig {
        GroundingConfig {
            box_threshold: self.box_threshold,
            text_threshold: self.text_threshold,
        }
    }

    /// Settings that change what a run produces for a given image.
    fn fingerprint(&self, template_version: &str, fallback: Option<&str>) -> String {
        serde_json::json!({
            "max_keywords": self.max_keywords,
            "context_turns": self.context_turns,
            "box_threshold": self.box_threshold,
            "text_threshold": self.text_threshold,
            "target_language": self.target_language,
            "template": template_version,
            "fallback": fallback,
        })
        .to_string()
    }
}

/// Everything a run needs besides the data: backends, prompt template, fallback lexicon.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextGenBackend>,
    pub grounding: Arc<dyn GroundingBackend>,
    pub template: PromptTemplate,
    pub lexicon: Option<Lexicon>,
    pub retry: RetryPolicy,
}

impl Backends {
    pub fn new(text: Arc<dyn TextGenBackend>, grounding: Arc<dyn GroundingBackend>) -> Self {
        Backends {
            text,
            grounding,
            template: PromptTemplate::default(),
            lexicon: None,
            retry: RetryPolicy::default(),
        }
    }
}

/// Per-image outcome, independent of where the image came from.
#[derive(Debug, Clone)]
pub struct ImageOutcome<'a> {
    pub context_turns_used: usize,
    pub keywords: KeywordList,
    pub detections: Vec<Detection>,
    pub refined: Refined<'a>,
}

/// The per-image path, shared by batch runs and single-image requests.
#[derive(Clone)]
pub struct Refiner {
    extractor: KeywordExtractor,
    grounder: Grounder,
    config: PipelineConfig,
    template_version: String,
    /// Digest of the fallback lexicon, if one is configured.
    fallback: Option<String>,
}

impl Refiner {
    pub fn new(config: PipelineConfig, backends: Backends) -> Result<Self, PipelineError> {
        config.validate()?;
        let retry = RetryPolicy {
            retries: config.kw_retries,
            ..backends.retry
        };
        let fallback = backends.lexicon.as_ref().map(|l| {
            let joined: Vec<String> = l.terms().collect();
            sha256_hex(joined.join("\n").as_bytes())
        });
        let extractor = KeywordExtractor::new(
            backends.text,
            KeywordConfig {
                max_keywords: config.max_keywords,
                target_language: config.target_language.clone(),
                retry,
                template: backends.template.clone(),
                lexicon: backends.lexicon,
            },
        );
        let grounder = Grounder::new(backends.grounding, config.grounding(), retry);
        Ok(Refiner {
            extractor,
            grounder,
            // the body digest catches edits to a template that kept its name
            template_version: format!(
                "{}#{}",
                backends.template.version,
                &sha256_hex(backends.template.body.as_bytes())[..16]
            ),
            fallback,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn context_for(&self, session: &Session, image_id: &str) -> Option<ContextWindow> {
        extract_context(session, image_id, self.config.context_turns).ok()
    }

    pub fn resume_key(&self, image_digest: &str) -> String {
        let mut h = Sha256::new();
        h.update(image_digest.as_bytes());
        h.update([0]);
        h.update(
            self.config
                .fingerprint(&self.template_version, self.fallback.as_deref())
                .as_bytes(),
        );
        hex(&h.finalize())
    }

    pub fn refine_window<'a>(&self, window: &ContextWindow, image: &ImageItem, bytes: &'a [u8]) -> ImageOutcome<'a> {
        let unchanged = |keywords, reason| ImageOutcome {
            context_turns_used: window.turns_used,
            keywords,
            detections: Vec::new(),
            refined: refine_image(image, bytes, &[], Some(reason)),
        };
        if window.is_empty() {
            return unchanged(KeywordList::empty(KeywordSource::Backend), RefinementReason::NoContext);
        }
        let extraction = self.extractor.extract(window);
        if extraction.keywords.is_empty() {
            let reason = if extraction.backend_error.is_some() {
                RefinementReason::BackendError
            } else {
                RefinementReason::NoKeywords
            };
            return unchanged(extraction.keywords, reason);
        }
        match self.grounder.ground(image, bytes, &extraction.keywords) {
            Ok(detections) => {
                let refined = refine_image(image, bytes, &detections, None);
                ImageOutcome {
                    context_turns_used: window.turns_used,
                    keywords: extraction.keywords,
                    detections,
                    refined,
                }
            }
            Err(GroundError::Backend(_)) => unchanged(extraction.keywords, RefinementReason::BackendError),
            Err(e) => {
                log::warn!("image {}: {e}", image.image_id);
                unchanged(extraction.keywords, RefinementReason::NoKeywords)
            }
        }
    }
}

/// One audit entry per image per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub session_id: String,
    pub image_id: String,
    pub context_turns_used: usize,
    pub keywords: KeywordList,
    pub detections: Vec<Detection>,
    pub result: RefinementResult,
    pub source_uri: String,
    pub output_uri: String,
    pub image_sha256: String,
    pub resume_key: String,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

impl ProvenanceRecord {
    pub fn without_timestamps(&self) -> Self {
        ProvenanceRecord {
            started_at_ms: 0,
            finished_at_ms: 0,
            ..self.clone()
        }
    }
}

pub fn read_provenance<R: BufRead>(reader: R) -> Result<Vec<ProvenanceRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Provenance {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Provenance {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_provenance<W: Write>(records: &[ProvenanceRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Image files addressed by dataset URIs relative to a root directory.
/// Refined images go next to their originals as `<image_id>.refined.<ext>`.
#[derive(Debug, Clone)]
pub struct ImageDir {
    root: PathBuf,
}

impl ImageDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageDir { root: root.into() }
    }

    pub fn path_of(&self, uri: &str) -> PathBuf {
        self.root.join(uri)
    }

    pub fn read(&self, uri: &str) -> io::Result<Vec<u8>> {
        fs::read(self.path_of(uri))
    }

    pub fn exists(&self, uri: &str) -> bool {
        self.path_of(uri).is_file()
    }

    pub fn refined_uri(image: &ImageItem, bytes: &[u8]) -> String {
        let ext = Path::new(&image.uri)
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_string)
            .or_else(|| crate::roi::image_extension(bytes).map(str::to_string))
            .unwrap_or_else(|| "img".into());
        let name = format!("{}.refined.{ext}", image.image_id);
        match image.uri.rfind('/') {
            Some(i) => format!("{}/{name}", &image.uri[..i]),
            None => name,
        }
    }

    pub fn write(&self, uri: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.path_of(uri);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dataset: Dataset,
    pub records: Vec<ProvenanceRecord>,
    /// Images whose earlier record was reused.
    pub resumed: usize,
}

/// Refines every image of `dataset`.
///
/// `previous` holds provenance from an earlier run; an image is skipped when its
/// record carries the same resume key and its refined file is still on disk.
pub fn refine_dataset(
    dataset: &Dataset,
    refiner: &Refiner,
    images: &ImageDir,
    previous: &[ProvenanceRecord],
) -> Result<RunOutput, PipelineError> {
    let slots = dataset.image_slots();
    let previous: HashMap<&str, &ProvenanceRecord> = previous.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let results: Mutex<Vec<Option<(ProvenanceRecord, bool)>>> = Mutex::new(vec![None; slots.len()]);
    let next = AtomicUsize::new(0);
    let workers = refiner.config.max_in_flight.min(slots.len()).max(1);

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&slot) = slots.get(i) else { break };
                let out = process_slot(dataset, slot, refiner, images, &previous);
                results.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });

    let results = results.into_inner().expect("result slots poisoned");
    let mut refined = dataset.clone();
    let mut records = Vec::with_capacity(slots.len());
    let mut resumed = 0;
    for (slot, out) in slots.iter().zip(results) {
        let (record, reused) = out.expect("every slot processed");
        resumed += usize::from(reused);
        if let ContentItem::Image(img) = &mut refined.sessions[slot.session].turns[slot.turn].items[slot.item] {
            let (w, h) = record.result.output_dims();
            img.uri = record.output_uri.clone();
            img.width = w;
            img.height = h;
        }
        records.push(record);
    }
    Ok(RunOutput {
        dataset: refined,
        records,
        resumed,
    })
}

fn process_slot(
    dataset: &Dataset,
    slot: ImageSlot,
    refiner: &Refiner,
    images: &ImageDir,
    previous: &HashMap<&str, &ProvenanceRecord>,
) -> (ProvenanceRecord, bool) {
    let started = now_ms();
    let session = &dataset.sessions[slot.session];
    let image = dataset.image_at(slot);
    let window = refiner
        .context_for(session, &image.image_id)
        .unwrap_or_else(|| ContextWindow::empty(&image.image_id));

    let bytes = match images.read(&image.uri) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("image {}: cannot read {}: {e}", image.image_id, image.uri);
            return (
                ProvenanceRecord {
                    session_id: session.session_id.clone(),
                    image_id: image.image_id.clone(),
                    context_turns_used: window.turns_used,
                    keywords: KeywordList::empty(KeywordSource::Backend),
                    detections: Vec::new(),
                    result: RefinementResult::unchanged(image, RefinementReason::ImageError),
                    source_uri: image.uri.clone(),
                    output_uri: image.uri.clone(),
                    image_sha256: String::new(),
                    resume_key: String::new(),
                    started_at_ms: started,
                    finished_at_ms: now_ms(),
                },
                false,
            );
        }
    };
    let digest = sha256_hex(&bytes);
    let resume_key = refiner.resume_key(&digest);

    if let Some(prev) = previous.get(image.image_id.as_str()) {
        let output_ok = !prev.result.is_cropped() || images.exists(&prev.output_uri);
        if prev.resume_key == resume_key && prev.source_uri == image.uri && output_ok {
            return ((*prev).clone(), true);
        }
    }

    let outcome = refiner.refine_window(&window, image, &bytes);
    let mut result = outcome.refined.result;
    let mut output_uri = image.uri.clone();
    if result.status == RefinementStatus::Cropped {
        let uri = ImageDir::refined_uri(image, &bytes);
        match images.write(&uri, &outcome.refined.bytes) {
            Ok(()) => output_uri = uri,
            Err(e) => {
                log::warn!("image {}: cannot write {uri}: {e}", image.image_id);
                result = RefinementResult::unchanged(image, RefinementReason::ImageError);
            }
        }
    }
    (
        ProvenanceRecord {
            session_id: session.session_id.clone(),
            image_id: image.image_id.clone(),
            context_turns_used: outcome.context_turns_used,
            keywords: outcome.keywords,
            detections: outcome.detections,
            result,
            source_uri: image.uri.clone(),
            output_uri,
            image_sha256: digest,
            resume_key,
            started_at_ms: started,
            finished_at_ms: now_ms(),
        },
        false,
    )
}

/// A difference between two datasets' structure or content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StructuralChange {
    SessionCount { before: usize, after: usize },
    Session { session: usize, what: String },
    TurnCount { session: usize },
    Turn { session: usize, turn: usize, what: String },
    ItemCount { session: usize, turn: usize },
    ItemKind { session: usize, turn: usize, item: usize },
    Text { session: usize, turn: usize, item: usize },
    ImageId { session: usize, turn: usize, item: usize },
    ImageUri { image_id: String },
    ImageDims { image_id: String },
    ImageExtra { image_id: String },
}

impl StructuralChange {
    /// True for the changes refinement is allowed to make.
    pub fn is_image_update(&self) -> bool {
        matches!(
            self,
            StructuralChange::ImageUri { .. } | StructuralChange::ImageDims { .. }
        )
    }
}

pub fn structural_diff(before: &Dataset, after: &Dataset) -> Vec<StructuralChange> {
    use StructuralChange as C;
    let mut out = Vec::new();
    if before.sessions.len() != after.sessions.len() {
        out.push(C::SessionCount {
            before: before.sessions.len(),
            after: after.sessions.len(),
        });
        return out;
    }
    for (si, (a, b)) in before.sessions.iter().zip(&after.sessions).enumerate() {
        for (what, same) in [
            ("session_id", a.session_id == b.session_id),
            ("department", a.department == b.department),
            ("extra", a.extra == b.extra),
        ] {
            if !same {
                out.push(C::Session {
                    session: si,
                    what: what.into(),
                });
            }
        }
        if a.turns.len() != b.turns.len() {
            out.push(C::TurnCount { session: si });
            continue;
        }
        for (ti, (ta, tb)) in a.turns.iter().zip(&b.turns).enumerate() {
            for (what, same) in [
                ("index", ta.index == tb.index),
                ("role", ta.role == tb.role),
                ("extra", ta.extra == tb.extra),
            ] {
                if !same {
                    out.push(C::Turn {
                        session: si,
                        turn: ti,
                        what: what.into(),
                    });
                }
            }
            if ta.items.len() != tb.items.len() {
                out.push(C::ItemCount { session: si, turn: ti });
                continue;
            }
            for (ii, pair) in ta.items.iter().zip(&tb.items).enumerate() {
                match pair {
                    (ContentItem::Text(x), ContentItem::Text(y)) => {
                        if x != y {
                            out.push(C::Text {
                                session: si,
                                turn: ti,
                                item: ii,
                            });
                        }
                    }
                    (ContentItem::Image(x), ContentItem::Image(y)) => {
                        if x.image_id != y.image_id {
                            out.push(C::ImageId {
                                session: si,
                                turn: ti,
                                item: ii,
                            });
                            continue;
                        }
                        let id = x.image_id.clone();
                        if x.uri != y.uri {
                            out.push(C::ImageUri { image_id: id.clone() });
                        }
                        if (x.width, x.height) != (y.width, y.height) {
                            out.push(C::ImageDims { image_id: id.clone() });
                        }
                        if x.extra != y.extra {
                            out.push(C::ImageExtra { image_id: id });
                        }
                    }
                    _ => out.push(C::ItemKind {
                        session: si,
                        turn: ti,
                        item: ii,
                    }),
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    AllImages,
    CroppedOnly,
}

pub const RATIO_BIN_EDGES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Area ratios in five right-closed bins: (0,0.2], (0.2,0.4], ..., (0.8,1.0].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioHistogram {
    pub population: Population,
    pub total: u64,
    pub counts: [u64; 5],
    /// `None` when the population is empty.
    pub percentages: Option<[f64; 5]>,
}

pub fn ratio_bin(ratio: f64) -> usize {
    RATIO_BIN_EDGES
        .iter()
        .position(|&edge| ratio <= edge)
        .unwrap_or(RATIO_BIN_EDGES.len() - 1)
}

pub fn histogram_of_ratios(ratios: impl IntoIterator<Item = f64>, population: Population) -> RatioHistogram {
    let mut counts = [0u64; 5];
    for r in ratios {
        counts[ratio_bin(r)] += 1;
    }
    let total: u64 = counts.iter().sum();
    let percentages = (total > 0).then(|| counts.map(|c| 100.0 * c as f64 / total as f64));
    RatioHistogram {
        population,
        total,
        counts,
        percentages,
    }
}

pub fn ratio_histogram(records: &[ProvenanceRecord], population: Population) -> RatioHistogram {
    let ratios = records
        .iter()
        .filter(|r| population == Population::AllImages || r.result.is_cropped())
        .map(|r| r.result.area_ratio);
    histogram_of_ratios(ratios, population)
}

impl fmt::Display for RatioHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.population {
            Population::AllImages => "all images",
            Population::CroppedOnly => "cropped images",
        };
        writeln!(f, "RoI area ratio ({label}, n = {})", self.total)?;
        writeln!(f, "{:<12} {:>8} {:>9}", "segment", "count", "percent")?;
        let mut lo = 0.0;
        for (i, edge) in RATIO_BIN_EDGES.iter().enumerate() {
            let pct = match self.percentages {
                Some(p) => format!("{:.2}%", p[i]),
                None => "n/a".into(),
            };
            writeln!(f, "({lo:.1}, {edge:.1}]  {:>8} {:>9}", self.counts[i], pct)?;
            lo = *edge;
        }
        Ok(())
    }
}
