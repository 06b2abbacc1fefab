//! Double-stimulus subjective assessment.
//!
//! Every rated response carries two scores on the 0-4 rubric: one for the
//! system under test (treatment) and one for the reference system. Their
//! difference `d = r - r_ref` feeds three DMOS collections:
//!
//! * session level: for session `s`, `sum_n sum_m d_nsm / (N * M_s)`;
//! * image level: for image `i`, `sum_n d_ni / N`, where `d_ni` is evaluator
//!   `n`'s difference on the response to the turn carrying image `i`;
//! * cropped-image level: the image-level values restricted to images whose
//!   refined area fell below a cutoff fraction of the original.
//!
//! MOS is the per-session mean of raw scores for one condition, averaged over sessions.

mod rubric;
mod significance;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use rubric::{rubric, RubricGrade};
pub use significance::{significance_test, SignificanceError, SignificanceResult, TestMethod};

use crate::pipeline::ProvenanceRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssessmentError {
    #[error("score {0} outside 0..=4")]
    ScoreOutOfRange(i64),
    #[error("ratings line {line}: invalid record at `{path}`: {message}")]
    Malformed { line: usize, path: String, message: String },
    #[error("duplicate rating by evaluator {evaluator} for session {session} response {response_index}")]
    DuplicateRating {
        evaluator: u32,
        session: String,
        response_index: u32,
    },
    #[error("incomplete rating grid: {} missing ratings", missing.len())]
    Incomplete { missing: Vec<MissingRating> },
    #[error("images not rated by every evaluator: {} gaps", gaps.len())]
    ImageGaps { gaps: Vec<ImageGap> },
    #[error("image `{0}` has no provenance record")]
    MissingProvenance(String),
    #[error("no ratings")]
    Empty,
    #[error(transparent)]
    Significance(#[from] SignificanceError),
    #[error("reading ratings: {0}")]
    Io(String),
}

/// A rubric grade, 0 (worst) to 4 (best).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Score(u8);

impl Score {
    pub const MAX: u8 = 4;

    pub fn new(v: i64) -> Result<Self, AssessmentError> {
        if (0..=i64::from(Self::MAX)).contains(&v) {
            Ok(Score(v as u8))
        } else {
            Err(AssessmentError::ScoreOutOfRange(v))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Score {
    type Error = AssessmentError;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Score::new(v)
    }
}

impl From<Score> for u8 {
    fn from(s: Score) -> u8 {
        s.0
    }
}

/// Treatment minus reference, in -4..=4.
pub fn score_diff(r: Score, r_ref: Score) -> i8 {
    r.0 as i8 - r_ref.0 as i8
}

/// Images a response addresses. Serialized as a string for one image and a list for several.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageLinks(pub Vec<String>);

impl ImageLinks {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for ImageLinks {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0.as_slice() {
            [one] => s.serialize_str(one),
            many => many.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ImageLinks {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            One(String),
            Many(Vec<String>),
        }
        Ok(match Option::<Repr>::deserialize(d)? {
            None => ImageLinks::default(),
            Some(Repr::One(s)) => ImageLinks(vec![s]),
            Some(Repr::Many(v)) => ImageLinks(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub evaluator: u32,
    pub session: String,
    pub response_index: u32,
    #[serde(rename = "image_id", default, skip_serializing_if = "ImageLinks::is_empty")]
    pub images: ImageLinks,
    pub score_treatment: Score,
    pub score_reference: Score,
}

impl RatingRecord {
    pub fn diff(&self) -> i8 {
        score_diff(self.score_treatment, self.score_reference)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingRating {
    pub evaluator: u32,
    pub session: String,
    pub response_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageGap {
    pub image_id: String,
    pub evaluator: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Treatment,
    Reference,
}

/// Ratings with unique (evaluator, session, response) keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingSet {
    records: Vec<RatingRecord>,
}

impl RatingSet {
    pub fn new(records: Vec<RatingRecord>) -> Result<Self, AssessmentError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert((r.evaluator, r.session.as_str(), r.response_index)) {
                return Err(AssessmentError::DuplicateRating {
                    evaluator: r.evaluator,
                    session: r.session.clone(),
                    response_index: r.response_index,
                });
            }
        }
        Ok(RatingSet { records })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// N: distinct evaluators.
    pub fn evaluators(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.evaluator).collect()
    }

    /// Responses rated per session; `M_s` is the size of each set.
    pub fn responses(&self) -> BTreeMap<&str, BTreeSet<u32>> {
        let mut out: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.session.as_str()).or_default().insert(r.response_index);
        }
        out
    }

    /// I: distinct linked images.
    pub fn images(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .flat_map(|r| r.images.0.iter().map(String::as_str))
            .collect()
    }

    /// I_s: distinct linked images per session.
    pub fn images_per_session(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            let e = out.entry(r.session.as_str()).or_default();
            e.extend(r.images.0.iter().map(String::as_str));
        }
        out
    }

    /// (evaluator, session, response) triples absent from the full grid.
    pub fn missing(&self) -> Vec<MissingRating> {
        let present: BTreeSet<(u32, &str, u32)> = self
            .records
            .iter()
            .map(|r| (r.evaluator, r.session.as_str(), r.response_index))
            .collect();
        let mut missing = Vec::new();
        for (session, responses) in self.responses() {
            for &m in &responses {
                for n in self.evaluators() {
                    if !present.contains(&(n, session, m)) {
                        missing.push(MissingRating {
                            evaluator: n,
                            session: session.to_string(),
                            response_index: m,
                        });
                    }
                }
            }
        }
        missing
    }

    fn require_complete(&self) -> Result<(), AssessmentError> {
        if self.records.is_empty() {
            return Err(AssessmentError::Empty);
        }
        let missing = self.missing();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(AssessmentError::Incomplete { missing })
        }
    }
}

pub fn parse_ratings<R: BufRead>(reader: R) -> Result<RatingSet, AssessmentError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AssessmentError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let rec: RatingRecord = serde_path_to_error::deserialize(de).map_err(|e| AssessmentError::Malformed {
            line: i + 1,
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        records.push(rec);
    }
    RatingSet::new(records)
}

pub fn write_ratings<W: Write>(records: &[RatingRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Session-level DMOS for every session.
pub fn session_dmos(rs: &RatingSet) -> Result<BTreeMap<String, f64>, AssessmentError> {
    rs.require_complete()?;
    let n = rs.evaluators().len() as i64;
    let mut sums: BTreeMap<&str, i64> = BTreeMap::new();
    for r in rs.records() {
        *sums.entry(r.session.as_str()).or_default() += i64::from(r.diff());
    }
    let responses = rs.responses();
    Ok(sums
        .into_iter()
        .map(|(s, sum)| {
            let m_s = responses[s].len() as i64;
            (s.to_string(), sum as f64 / (n * m_s) as f64)
        })
        .collect())
}

/// Image-level DMOS for every linked image.
///
/// When one evaluator rated several responses linked to the same image, their
/// differences are averaged into that evaluator's `d_ni`.
pub fn image_dmos(rs: &RatingSet) -> Result<BTreeMap<String, f64>, AssessmentError> {
    let evaluators = rs.evaluators();
    // image -> evaluator -> (sum of d, count)
    let mut per: BTreeMap<&str, BTreeMap<u32, (i64, i64)>> = BTreeMap::new();
    for r in rs.records() {
        for img in &r.images.0 {
            let e = per.entry(img.as_str()).or_default().entry(r.evaluator).or_default();
            e.0 += i64::from(r.diff());
            e.1 += 1;
        }
    }
    let gaps: Vec<ImageGap> = per
        .iter()
        .flat_map(|(img, by_eval)| {
            evaluators
                .iter()
                .filter(|n| !by_eval.contains_key(n))
                .map(|&n| ImageGap {
                    image_id: img.to_string(),
                    evaluator: n,
                })
        })
        .collect();
    if !gaps.is_empty() {
        return Err(AssessmentError::ImageGaps { gaps });
    }
    let n = evaluators.len() as f64;
    Ok(per
        .into_iter()
        .map(|(img, by_eval)| {
            let total: f64 = by_eval.values().map(|&(sum, count)| sum as f64 / count as f64).sum();
            (img.to_string(), total / n)
        })
        .collect())
}

/// Image-level DMOS restricted to images cropped below `cutoff` of their original area.
pub fn cropped_image_dmos(
    rs: &RatingSet,
    provenance: &[ProvenanceRecord],
    cutoff: f64,
) -> Result<BTreeMap<String, f64>, AssessmentError> {
    let by_image: HashMap<&str, &ProvenanceRecord> = provenance.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let all = image_dmos(rs)?;
    let mut out = BTreeMap::new();
    for (img, v) in all {
        let rec = by_image
            .get(img.as_str())
            .ok_or_else(|| AssessmentError::MissingProvenance(img.clone()))?;
        if rec.result.is_cropped() && rec.result.area_ratio < cutoff {
            out.insert(img, v);
        }
    }
    Ok(out)
}

/// Mean opinion score of one condition.
pub fn mos(rs: &RatingSet, condition: Condition) -> Result<f64, AssessmentError> {
    rs.require_complete()?;
    let n = rs.evaluators().len() as i64;
    let mut sums: BTreeMap<&str, i64> = BTreeMap::new();
    for r in rs.records() {
        let score = match condition {
            Condition::Treatment => r.score_treatment,
            Condition::Reference => r.score_reference,
        };
        *sums.entry(r.session.as_str()).or_default() += i64::from(score.get());
    }
    let responses = rs.responses();
    let per_session: Vec<f64> = sums
        .iter()
        .map(|(s, sum)| *sum as f64 / (n * responses[s].len() as i64) as f64)
        .collect();
    Ok(per_session.iter().sum::<f64>() / per_session.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedDmos {
    pub mean: f64,
    pub count: usize,
    /// Absent for a single value.
    pub test: Option<SignificanceResult>,
}

/// Mean of a DMOS collection with its significance against zero.
pub fn averaged_dmos(values: &[f64], method: TestMethod) -> Result<AveragedDmos, AssessmentError> {
    if values.is_empty() {
        return Err(AssessmentError::Empty);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let test = if values.len() >= 2 {
        Some(significance_test(values, method)?)
    } else {
        None
    };
    Ok(AveragedDmos {
        mean,
        count: values.len(),
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub evaluators: usize,
    pub sessions: usize,
    pub images: usize,
    pub method: TestMethod,
    pub cutoff: f64,
    pub session_dmos: BTreeMap<String, f64>,
    pub image_dmos: BTreeMap<String, f64>,
    /// Absent when no provenance was supplied.
    pub cropped_image_dmos: Option<BTreeMap<String, f64>>,
    pub session_average: Option<AveragedDmos>,
    pub image_average: Option<AveragedDmos>,
    pub cropped_image_average: Option<AveragedDmos>,
    pub mos: f64,
    pub mos_ref: f64,
}

fn average_of(map: &BTreeMap<String, f64>, method: TestMethod) -> Result<Option<AveragedDmos>, AssessmentError> {
    if map.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = map.values().copied().collect();
    averaged_dmos(&values, method).map(Some)
}

pub fn build_report(
    rs: &RatingSet,
    provenance: Option<&[ProvenanceRecord]>,
    cutoff: f64,
    method: TestMethod,
) -> Result<MetricReport, AssessmentError> {
    let session = session_dmos(rs)?;
    let image = image_dmos(rs)?;
    let cropped = provenance.map(|p| cropped_image_dmos(rs, p, cutoff)).transpose()?;
    Ok(MetricReport {
        evaluators: rs.evaluators().len(),
        sessions: session.len(),
        images: image.len(),
        method,
        cutoff,
        session_average: average_of(&session, method)?,
        image_average: average_of(&image, method)?,
        cropped_image_average: match &cropped {
            Some(c) => average_of(c, method)?,
            None => None,
        },
        session_dmos: session,
        image_dmos: image,
        cropped_image_dmos: cropped,
        mos: mos(rs, Condition::Treatment)?,
        mos_ref: mos(rs, Condition::Reference)?,
    })
}

fn cell(a: &Option<AveragedDmos>) -> String {
    match a {
        None => "n/a".into(),
        Some(AveragedDmos { mean, test: None, .. }) => format!("{mean:.3} (p n/a)"),
        Some(AveragedDmos {
            mean, test: Some(t), ..
        }) => {
            if t.p_is_bound {
                format!("{mean:.3} (p<{:.0e})", t.p_value)
            } else {
                format!("{mean:.3} ({:.4})", t.p_value)
            }
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let method = match self.method {
            TestMethod::TTest => "one-sample t-test",
            TestMethod::Wilcoxon => "Wilcoxon signed-rank",
        };
        writeln!(
            f,
            "N = {} evaluators, S = {} sessions, I = {} images; p-values: {method}",
            self.evaluators, self.sessions, self.images
        )?;
        writeln!(f)?;
        writeln!(f, "Averaged DMOS (p-value)")?;
        writeln!(
            f,
            "{:<24} {:<24} {:<24}",
            "Session-Level",
            "Image-Level",
            format!("Cropped Image-Level (<{:.0}%)", self.cutoff * 100.0)
        )?;
        writeln!(
            f,
            "{:<24} {:<24} {:<24}",
            cell(&self.session_average),
            cell(&self.image_average),
            cell(&self.cropped_image_average)
        )?;
        writeln!(f)?;
        writeln!(f, "Averaged MOS")?;
        writeln!(f, "{:<12} {:<12}", "MOS_ref", "MOS")?;
        writeln!(f, "{:<12.3} {:<12.3}", self.mos_ref, self.mos)
    }
}
