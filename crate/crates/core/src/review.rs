//! Manual validation: two validators judge each explanation, a third
//! resolves disagreements, and agreement is summarized with Cohen's kappa.
//!
//! Session state is never edited in place. A session starts from a snapshot
//! of its items, and every judgment or resolution is an appended event;
//! loading a session replays the events.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Label, PairKey};
use crate::detector::Prediction;
use crate::kln::KlnSize;
use crate::llm::{write_atomic, ExplanationRecord};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("session `{0}` already exists")]
    DuplicateSession(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session has no item {0}")]
    UnknownItem(usize),
    #[error("`{0}` is not a validator of this session")]
    UnknownValidator(String),
    #[error("validator `{0}` already judged this item")]
    DoubleJudgment(String),
    #[error("invalid judgment: {0}")]
    InvalidJudgment(String),
    #[error("item {0} is not disputed")]
    NotDisputed(usize),
    #[error("session is incomplete: {0} item(s) still open")]
    IncompleteSession(usize),
    #[error("a session needs at least one record")]
    NoRecords,
    #[error("a session needs exactly two judging validators, got {0}")]
    ValidatorCount(usize),
    #[error("record {record} references a pair outside the corpus: {message}")]
    MissingPair { record: String, message: String },
    #[error("no prediction for pair {0}")]
    MissingPrediction(PairKey),
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot compute agreement over empty label lists")]
    EmptyLabels,
    #[error("storage failure at {path}: {message}")]
    Storage { path: PathBuf, message: String },
}

impl ReviewError {
    /// Stable machine-readable reason.
    pub fn reason(&self) -> &'static str {
        match self {
            ReviewError::DuplicateSession(_) => "duplicate_session",
            ReviewError::UnknownSession(_) => "unknown_session",
            ReviewError::UnknownItem(_) => "unknown_item",
            ReviewError::UnknownValidator(_) => "unknown_validator",
            ReviewError::DoubleJudgment(_) => "double_judgment",
            ReviewError::InvalidJudgment(_) => "invalid_judgment",
            ReviewError::NotDisputed(_) => "not_disputed",
            ReviewError::IncompleteSession(_) => "incomplete_session",
            ReviewError::NoRecords => "no_records",
            ReviewError::ValidatorCount(_) => "validator_count",
            ReviewError::MissingPair { .. } => "missing_pair",
            ReviewError::MissingPrediction(_) => "missing_prediction",
            ReviewError::LengthMismatch(..) => "length_mismatch",
            ReviewError::EmptyLabels => "empty_labels",
            ReviewError::Storage { .. } => "storage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BadReason {
    NoExample,
    Irrelevant,
    WrongExplanation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Judgment {
    pub validator_id: String,
    pub correctness: Correctness,
    pub quality: Quality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bad_reason: Option<BadReason>,
    /// Some of the cited code lines were not useful.
    #[serde(default)]
    pub bad_line_examples: bool,
    #[serde(default)]
    pub notes: String,
}

impl Judgment {
    pub fn check(&self) -> Result<(), ReviewError> {
        match (self.quality, self.bad_reason) {
            (Quality::Bad, None) => Err(ReviewError::InvalidJudgment(
                "a bad explanation needs a bad_reason".into(),
            )),
            (Quality::Good, Some(_)) => Err(ReviewError::InvalidJudgment(
                "a good explanation cannot carry a bad_reason".into(),
            )),
            _ => Ok(()),
        }
    }

    fn agrees_with(&self, other: &Judgment) -> bool {
        self.correctness == other.correctness && self.quality == other.quality
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub resolver_id: String,
    pub judgment: Judgment,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Disputed,
    Complete,
}

/// Question text shown to validators while they set the context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionContext {
    pub question_a: String,
    pub question_b: String,
    #[serde(default)]
    pub text_a: Option<String>,
    #[serde(default)]
    pub text_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub pair_key: PairKey,
    /// Short pair label such as `CP1`.
    pub pair_label: String,
    pub size: KlnSize,
    pub code_a: String,
    pub code_b: String,
    pub explanation_markdown: String,
    pub prediction: Prediction,
    pub ground_truth: Label,
    pub context: QuestionContext,
    #[serde(default)]
    pub judgments: BTreeMap<String, Judgment>,
    #[serde(default)]
    pub resolution: Option<Resolution>,
}

impl ReviewItem {
    pub fn status(&self) -> ItemStatus {
        if self.judgments.len() < 2 {
            return ItemStatus::Pending;
        }
        let mut it = self.judgments.values();
        let (a, b) = (it.next().unwrap(), it.next().unwrap());
        if a.agrees_with(b) || self.resolution.is_some() {
            ItemStatus::Complete
        } else {
            ItemStatus::Disputed
        }
    }

    /// Judgment used in reports: the resolution when present, otherwise the
    /// agreed judgment. `None` while the item is open.
    pub fn final_judgment(&self) -> Option<&Judgment> {
        match self.status() {
            ItemStatus::Complete => self
                .resolution
                .as_ref()
                .map(|r| &r.judgment)
                .or_else(|| self.judgments.values().next()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    /// The two validators who judge every item, main validator first.
    pub validators: Vec<String>,
    /// Validators who may only resolve disputes.
    #[serde(default)]
    pub resolvers: Vec<String>,
    pub items: Vec<ReviewItem>,
}

/// Input for one session item.
#[derive(Debug, Clone)]
pub struct ItemSource<'a> {
    pub record: &'a ExplanationRecord,
    pub pair_label: String,
    pub prediction: Prediction,
}

impl ReviewSession {
    pub fn statuses(&self) -> Vec<ItemStatus> {
        self.items.iter().map(ReviewItem::status).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.items.iter().all(|i| i.status() == ItemStatus::Complete)
    }

    fn item_mut(&mut self, index: usize) -> Result<&mut ReviewItem, ReviewError> {
        self.items.get_mut(index).ok_or(ReviewError::UnknownItem(index))
    }

    /// Stores a judgment from one of the two validators.
    pub fn record_judgment(&mut self, index: usize, judgment: Judgment) -> Result<&ReviewItem, ReviewError> {
        judgment.check()?;
        if !self.validators.contains(&judgment.validator_id) {
            return Err(ReviewError::UnknownValidator(judgment.validator_id));
        }
        let item = self.item_mut(index)?;
        if item.judgments.contains_key(&judgment.validator_id) {
            return Err(ReviewError::DoubleJudgment(judgment.validator_id));
        }
        item.judgments.insert(judgment.validator_id.clone(), judgment);
        Ok(item)
    }

    /// Settles a disputed item.
    pub fn record_resolution(&mut self, index: usize, resolution: Resolution) -> Result<&ReviewItem, ReviewError> {
        resolution.judgment.check()?;
        let known = self.validators.contains(&resolution.resolver_id)
            || self.resolvers.contains(&resolution.resolver_id);
        if !known {
            return Err(ReviewError::UnknownValidator(resolution.resolver_id));
        }
        let item = self.item_mut(index)?;
        if item.status() != ItemStatus::Disputed {
            return Err(ReviewError::NotDisputed(index));
        }
        item.resolution = Some(resolution);
        Ok(item)
    }
}

/// Builds a session with every item pending.
pub fn create_session(
    session_id: impl Into<String>,
    sources: &[ItemSource<'_>],
    validators: Vec<String>,
    resolvers: Vec<String>,
    corpus: &Corpus,
    question_texts: &HashMap<String, String>,
) -> Result<ReviewSession, ReviewError> {
    if sources.is_empty() {
        return Err(ReviewError::NoRecords);
    }
    if validators.len() != 2 || validators[0] == validators[1] {
        return Err(ReviewError::ValidatorCount(validators.len()));
    }
    let items = sources
        .iter()
        .map(|src| {
            let record = src.record;
            let missing = |e: crate::corpus::CorpusError| ReviewError::MissingPair {
                record: record.record_id.clone(),
                message: e.to_string(),
            };
            let pair = corpus.pair(&record.pair_key).map_err(missing)?;
            let (a, b) = corpus.pair_snippets(&pair).map_err(missing)?;
            Ok(ReviewItem {
                record_id: record.record_id.clone(),
                pair_key: record.pair_key.clone(),
                pair_label: src.pair_label.clone(),
                size: record.size,
                code_a: a.text(),
                code_b: b.text(),
                explanation_markdown: record.raw_response.clone(),
                prediction: src.prediction,
                ground_truth: pair.ground_truth(),
                context: QuestionContext {
                    question_a: a.question_id.clone(),
                    question_b: b.question_id.clone(),
                    text_a: question_texts.get(&a.question_id).cloned(),
                    text_b: question_texts.get(&b.question_id).cloned(),
                },
                judgments: BTreeMap::new(),
                resolution: None,
            })
        })
        .collect::<Result<Vec<_>, ReviewError>>()?;
    Ok(ReviewSession {
        session_id: session_id.into(),
        validators,
        resolvers,
        items,
    })
}

/// Cohen's kappa with a flag for the degenerate case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub observed: f64,
    pub expected: f64,
    /// Both raters used one and the same category throughout, so chance
    /// agreement is 1 and the ratio is 0/0; `value` is reported as 1.
    pub degenerate: bool,
}

/// Chance-corrected agreement between two raters' label sequences.
pub fn cohen_kappa<T: Eq + Hash>(labels_a: &[T], labels_b: &[T]) -> Result<Kappa, ReviewError> {
    if labels_a.len() != labels_b.len() {
        return Err(ReviewError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(ReviewError::EmptyLabels);
    }
    let n = labels_a.len() as u64;
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count() as u64;
    let mut marginals: HashMap<&T, (u64, u64)> = HashMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        marginals.entry(a).or_default().0 += 1;
        marginals.entry(b).or_default().1 += 1;
    }
    let chance: u64 = marginals.values().map(|(x, y)| x * y).sum();
    let observed = agree as f64 / n as f64;
    let expected = chance as f64 / (n * n) as f64;
    if chance == n * n {
        return Ok(Kappa {
            value: 1.0,
            observed,
            expected,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (observed - expected) / (1.0 - expected),
        observed,
        expected,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRow {
    pub pair_label: String,
    pub pair_key: PairKey,
    pub ground_truth: Label,
    pub prediction: Label,
    pub by_size: BTreeMap<KlnSize, Correctness>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityCounts {
    pub good: usize,
    pub bad: usize,
    pub bad_reasons: BTreeMap<BadReason, usize>,
    /// Items whose cited code lines were flagged as not useful.
    pub bad_line_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub correctness: Vec<CorrectnessRow>,
    pub correct: usize,
    pub total: usize,
    pub quality_by_size: BTreeMap<KlnSize, QualityCounts>,
    /// Over the two validators' own labels, before any resolution.
    pub kappa_correctness: Kappa,
    pub kappa_quality: Kappa,
}

/// Tables of final labels plus agreement of the two validators.
pub fn session_report(session: &ReviewSession) -> Result<SessionReport, ReviewError> {
    let open = session
        .items
        .iter()
        .filter(|i| i.status() != ItemStatus::Complete)
        .count();
    if open > 0 {
        return Err(ReviewError::IncompleteSession(open));
    }
    let mut rows: Vec<CorrectnessRow> = Vec::new();
    let mut quality_by_size: BTreeMap<KlnSize, QualityCounts> = BTreeMap::new();
    let mut correct = 0;
    for item in &session.items {
        let verdict = item.final_judgment().expect("complete items have a final judgment");
        correct += (verdict.correctness == Correctness::Correct) as usize;
        let row = match rows.iter_mut().position(|r| r.pair_key == item.pair_key) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(CorrectnessRow {
                    pair_label: item.pair_label.clone(),
                    pair_key: item.pair_key.clone(),
                    ground_truth: item.ground_truth,
                    prediction: item.prediction.label,
                    by_size: BTreeMap::new(),
                });
                rows.last_mut().unwrap()
            }
        };
        row.by_size.insert(item.size, verdict.correctness);
        let q = quality_by_size.entry(item.size).or_default();
        match verdict.quality {
            Quality::Good => q.good += 1,
            Quality::Bad => {
                q.bad += 1;
                if let Some(reason) = verdict.bad_reason {
                    *q.bad_reasons.entry(reason).or_default() += 1;
                }
            }
        }
        q.bad_line_examples += verdict.bad_line_examples as usize;
    }
    let first = |item: &ReviewItem, v: &str| item.judgments.get(v).cloned().expect("complete items carry both judgments");
    let (va, vb) = (&session.validators[0], &session.validators[1]);
    let ja: Vec<Judgment> = session.items.iter().map(|i| first(i, va)).collect();
    let jb: Vec<Judgment> = session.items.iter().map(|i| first(i, vb)).collect();
    let ca: Vec<_> = ja.iter().map(|j| j.correctness).collect();
    let cb: Vec<_> = jb.iter().map(|j| j.correctness).collect();
    let qa: Vec<_> = ja.iter().map(|j| j.quality).collect();
    let qb: Vec<_> = jb.iter().map(|j| j.quality).collect();
    Ok(SessionReport {
        session_id: session.session_id.clone(),
        correctness: rows,
        correct,
        total: session.items.len(),
        quality_by_size,
        kappa_correctness: cohen_kappa(&ca, &cb)?,
        kappa_quality: cohen_kappa(&qa, &qb)?,
    })
}

/// Appended session event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum SessionEvent {
    Judgment { item: usize, judgment: Judgment },
    Resolution { item: usize, resolution: Resolution },
}

impl SessionEvent {
    fn apply(self, session: &mut ReviewSession) -> Result<(), ReviewError> {
        match self {
            SessionEvent::Judgment { item, judgment } => session.record_judgment(item, judgment).map(drop),
            SessionEvent::Resolution { item, resolution } => session.record_resolution(item, resolution).map(drop),
        }
    }
}

struct SessionSlot {
    state: RwLock<ReviewSession>,
    write: Mutex<()>,
}

/// Sessions with optional on-disk persistence.
///
/// On disk, each session is a directory holding `session.json` (the
/// pending snapshot) and `events.jsonl`. Writes to one session are
/// serialized; writes to different sessions and all reads run concurrently.
pub struct SessionStore {
    dir: Option<PathBuf>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        SessionStore {
            dir: None,
            sessions: RwLock::new(BTreeMap::new()),
        }
    }

    /// Opens `dir`, replaying every session found there.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let dir = dir.into();
        let storage = |path: &Path, e: &dyn std::fmt::Display| ReviewError::Storage {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(&dir).map_err(|e| storage(&dir, &e))?;
        let mut sessions = BTreeMap::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| storage(&dir, &e))? {
            let path = entry.map_err(|e| storage(&dir, &e))?.path();
            let snapshot = path.join("session.json");
            if !snapshot.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&snapshot).map_err(|e| storage(&snapshot, &e))?;
            let mut session: ReviewSession = serde_json::from_str(&text).map_err(|e| storage(&snapshot, &e))?;
            let events = path.join("events.jsonl");
            if events.is_file() {
                let file = std::fs::File::open(&events).map_err(|e| storage(&events, &e))?;
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(|e| storage(&events, &e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let event: SessionEvent = serde_json::from_str(&line).map_err(|e| storage(&events, &e))?;
                    event.apply(&mut session)?;
                }
            }
            sessions.insert(session.session_id.clone(), Arc::new(SessionSlot {
                state: RwLock::new(session),
                write: Mutex::new(()),
            }));
        }
        Ok(SessionStore {
            dir: Some(dir),
            sessions: RwLock::new(sessions),
        })
    }

    fn session_dir(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(sanitize(id)))
    }

    pub fn insert(&self, session: ReviewSession) -> Result<(), ReviewError> {
        let mut sessions = self.sessions.write().expect("store lock");
        if sessions.contains_key(&session.session_id) {
            return Err(ReviewError::DuplicateSession(session.session_id));
        }
        if let Some(dir) = self.session_dir(&session.session_id) {
            let path = dir.join("session.json");
            let json = serde_json::to_vec_pretty(&session).expect("sessions serialize");
            write_atomic(&path, &json).map_err(|e| ReviewError::Storage {
                path,
                message: e.to_string(),
            })?;
        }
        sessions.insert(session.session_id.clone(), Arc::new(SessionSlot {
            state: RwLock::new(session),
            write: Mutex::new(()),
        }));
        Ok(())
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ReviewError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ReviewError::UnknownSession(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().expect("store lock").keys().cloned().collect()
    }

    /// Snapshot of a session.
    pub fn get(&self, id: &str) -> Result<ReviewSession, ReviewError> {
        Ok(self.slot(id)?.state.read().expect("session lock").clone())
    }

    /// Applies an event: validated against the current state, appended to
    /// the log, then applied in memory.
    pub fn apply(&self, id: &str, event: SessionEvent) -> Result<ReviewItem, ReviewError> {
        let slot = self.slot(id)?;
        let _writer = slot.write.lock().expect("writer lock");
        let mut next = slot.state.read().expect("session lock").clone();
        let item = match &event {
            SessionEvent::Judgment { item, .. } | SessionEvent::Resolution { item, .. } => *item,
        };
        event.clone().apply(&mut next)?;
        if let Some(dir) = self.session_dir(id) {
            let path = dir.join("events.jsonl");
            let storage = |e: std::io::Error| ReviewError::Storage {
                path: path.clone(),
                message: e.to_string(),
            };
            let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(storage)?;
            let mut line = serde_json::to_string(&event).expect("events serialize");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(storage)?;
            file.sync_data().map_err(storage)?;
        }
        let result = next.items[item].clone();
        *slot.state.write().expect("session lock") = next;
        Ok(result)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    enum L {
        A,
        B,
    }
    use L::*;

    pub(crate) fn judgment(v: &str, c: Correctness, q: Quality) -> Judgment {
        Judgment {
            validator_id: v.into(),
            correctness: c,
            quality: q,
            bad_reason: (q == Quality::Bad).then_some(BadReason::NoExample),
            bad_line_examples: false,
            notes: String::new(),
        }
    }

    #[test]
    fn kappa_hand_examples() {
        let k = cohen_kappa(&[A, A, B, B], &[A, B, A, B]).unwrap();
        assert!((k.value - 0.0).abs() < 1e-9);
        let k = cohen_kappa(&[A, A, A, B], &[A, A, B, B]).unwrap();
        assert!((k.observed - 0.75).abs() < 1e-12 && (k.expected - 0.5).abs() < 1e-12);
        assert!((k.value - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kappa_degenerate_case_is_flagged() {
        let k = cohen_kappa(&[A, A, A], &[A, A, A]).unwrap();
        assert_eq!((k.value, k.degenerate), (1.0, true));
        let k = cohen_kappa(&[A, B], &[A, B]).unwrap();
        assert_eq!((k.value, k.degenerate), (1.0, false));
    }

    #[test]
    fn kappa_input_errors() {
        assert!(matches!(cohen_kappa(&[A], &[A, B]), Err(ReviewError::LengthMismatch(1, 2))));
        assert!(matches!(cohen_kappa::<L>(&[], &[]), Err(ReviewError::EmptyLabels)));
    }

    #[test]
    fn bad_quality_needs_reason() {
        let mut j = judgment("v", Correctness::Correct, Quality::Bad);
        assert!(j.check().is_ok());
        j.bad_reason = None;
        assert!(matches!(j.check(), Err(ReviewError::InvalidJudgment(_))));
        let mut g = judgment("v", Correctness::Correct, Quality::Good);
        g.bad_reason = Some(BadReason::Irrelevant);
        assert!(g.check().is_err());
    }
}
