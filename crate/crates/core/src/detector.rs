//! Black-box clone detector adapters.
//!
//! The explainer never looks inside the detector. It only needs a label and
//! a confidence for any pair, which may come from a precomputed prediction
//! file, a remote scoring service, or a configurable stub.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodePair, Corpus, CorpusError, Label, PairKey};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no prediction for pair {0}")]
    MissingPrediction(PairKey),
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("duplicate prediction for pair {0}")]
    DuplicateKey(PairKey),
    #[error("cannot parse prediction file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("remote detector failed: {0}")]
    Remote(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Detector output for one pair. `confidence` is the probability the
/// detector assigns to `label`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub confidence: f64,
}

impl Prediction {
    pub fn new(label: Label, confidence: f64) -> Result<Self, DetectorError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectorError::ConfidenceOutOfRange(confidence));
        }
        Ok(Prediction { label, confidence })
    }
}

/// Predictions loaded from disk, keyed by canonical pair key.
#[derive(Debug, Clone, Default)]
pub struct PredictionStore {
    entries: HashMap<PairKey, Prediction>,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    pair_key: String,
    label: String,
    confidence: f64,
}

impl PredictionStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &PairKey) -> Option<&Prediction> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PairKey, &Prediction)> {
        self.entries.iter()
    }

    pub fn insert(&mut self, key: PairKey, prediction: Prediction) -> Result<(), DetectorError> {
        Prediction::new(prediction.label, prediction.confidence)?;
        if self.entries.contains_key(&key) {
            return Err(DetectorError::DuplicateKey(key));
        }
        self.entries.insert(key, prediction);
        Ok(())
    }
}

/// Reads `{pair_key, label, confidence}` rows from a `.csv`, `.tsv`,
/// `.jsonl`, or `.json` (array) file.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionStore, DetectorError> {
    let path = path.as_ref();
    let parse_error = |message: String| DetectorError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let raw = std::fs::read_to_string(path).map_err(|source| DetectorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rows: Vec<PredictionRow> = match path.extension().and_then(|e| e.to_str()) {
        Some(ext @ ("csv" | "tsv")) => csv::ReaderBuilder::new()
            .delimiter(if ext == "tsv" { b'\t' } else { b',' })
            .trim(csv::Trim::All)
            .from_reader(raw.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| parse_error(e.to_string()))?,
        Some("jsonl") => raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| parse_error(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<_, _>>()?,
        _ => serde_json::from_str(&raw).map_err(|e| parse_error(e.to_string()))?,
    };
    let mut store = PredictionStore::default();
    for row in rows {
        let key: PairKey = row.pair_key.parse()?;
        let label: Label = row.label.parse().map_err(parse_error)?;
        store.insert(key, Prediction::new(label, row.confidence)?)?;
    }
    Ok(store)
}

/// Label rule of the stub detector before flips are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StubRule {
    EchoGroundTruth,
    Constant(Label),
}

/// Test detector with an explicit rule. Pairs in `flips` get the opposite
/// of what the rule says, which reproduces negative predictions without a
/// real model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubDetector {
    pub rule: StubRule,
    pub confidence: f64,
    pub flips: BTreeSet<PairKey>,
    pub flip_confidence: f64,
}

impl Default for StubDetector {
    fn default() -> Self {
        StubDetector {
            rule: StubRule::EchoGroundTruth,
            confidence: 1.0,
            flips: BTreeSet::new(),
            flip_confidence: 1.0,
        }
    }
}

impl StubDetector {
    pub fn echo() -> Self {
        Self::default()
    }

    pub fn with_flips(mut self, flips: impl IntoIterator<Item = PairKey>) -> Self {
        self.flips.extend(flips);
        self
    }

    fn predict(&self, pair: &CodePair) -> Result<Prediction, DetectorError> {
        let base = match self.rule {
            StubRule::EchoGroundTruth => pair.ground_truth(),
            StubRule::Constant(label) => label,
        };
        if self.flips.contains(&pair.key()) {
            Prediction::new(base.flipped(), self.flip_confidence)
        } else {
            Prediction::new(base, self.confidence)
        }
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    code_a: &'a str,
    code_b: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    label: String,
    confidence: f64,
}

/// Detector behind an HTTP endpoint: `POST {code_a, code_b}` returns
/// `{label, confidence}`. Concurrent callers share a fixed number of
/// in-flight slots.
#[derive(Debug)]
pub struct RemoteDetector {
    url: String,
    client: reqwest::blocking::Client,
    slots_tx: Sender<()>,
    slots_rx: Receiver<()>,
}

impl RemoteDetector {
    pub fn new(url: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Result<Self, DetectorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| DetectorError::Remote(e.to_string()))?;
        let limit = max_in_flight.max(1);
        let (slots_tx, slots_rx) = crossbeam_channel::bounded(limit);
        for _ in 0..limit {
            slots_tx.send(()).expect("channel has capacity");
        }
        Ok(RemoteDetector {
            url: url.into(),
            client,
            slots_tx,
            slots_rx,
        })
    }

    fn predict(&self, pair: &CodePair, corpus: &Corpus) -> Result<Prediction, DetectorError> {
        let (a, b) = corpus.pair_snippets(pair)?;
        let (code_a, code_b) = (a.text(), b.text());
        self.slots_rx.recv().expect("slot sender lives in self");
        let result = self
            .client
            .post(&self.url)
            .json(&RemoteRequest {
                code_a: &code_a,
                code_b: &code_b,
            })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json::<RemoteResponse>());
        self.slots_tx.send(()).expect("slot receiver lives in self");
        let body = result.map_err(|e| DetectorError::Remote(e.to_string()))?;
        let label = body
            .label
            .parse()
            .map_err(|e: String| DetectorError::Remote(format!("malformed response: {e}")))?;
        Prediction::new(label, body.confidence)
    }
}

/// The detector the pipeline explains.
#[derive(Debug)]
pub enum DetectorAdapter {
    FileBacked(PredictionStore),
    Remote(RemoteDetector),
    Stub(StubDetector),
}

impl DetectorAdapter {
    pub fn kind(&self) -> &'static str {
        match self {
            DetectorAdapter::FileBacked(_) => "file-backed",
            DetectorAdapter::Remote(_) => "remote",
            DetectorAdapter::Stub(_) => "stub",
        }
    }

    pub fn predict(&self, pair: &CodePair, corpus: &Corpus) -> Result<Prediction, DetectorError> {
        match self {
            DetectorAdapter::FileBacked(store) => {
                let key = pair.key();
                store
                    .get(&key)
                    .copied()
                    .ok_or(DetectorError::MissingPrediction(key))
            }
            DetectorAdapter::Remote(remote) => remote.predict(pair, corpus),
            DetectorAdapter::Stub(stub) => stub.predict(pair),
        }
    }
}
