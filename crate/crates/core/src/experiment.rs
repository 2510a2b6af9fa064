//! The experiment matrix: every test pair under every neighborhood size,
//! temperature mode, and run index, persisted cell by cell.
//!
//! Output layout:
//!
//! ```text
//! <out>/<name>/manifest.json
//! <out>/<name>/<pair label>/<size>-<mode>-<run>/<record_id>.json
//! <out>/<name>/<pair label>/<size>-<mode>-<run>/<record_id>.md
//! <out>/<name>/<pair label>/<size>-<mode>-<run>/validation.json
//! ```
//!
//! A cell whose record file already loads is not sent to the LLM again.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::{sample_test_pairs, CodePair, Corpus, CorpusError, Label, PairKey};
use crate::detector::{DetectorAdapter, DetectorError, Prediction};
use crate::kln::{extend_neighborhood, sample_neighborhood, KlnError, KlnSize};
use crate::llm::{
    complete, load_record, record_path, save_record, write_atomic, ChatBackend, ExplanationRecord, LlmConfig,
    LlmError, RecordError, TemperatureMode,
};
use crate::prompt::{build_prompt, render, PromptError, PromptTemplate};
use crate::validate::{
    aggregate, validate_record, AccuracyTable, CellKey, LocationHistogram, MatchMode, ValidateError,
    ValidationResult,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("target pair {pair}: {source}")]
    TargetPrediction {
        pair: PairKey,
        #[source]
        source: DetectorError,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
}

/// Errors confined to one cell.
#[derive(Debug, Error)]
pub enum CellError {
    #[error(transparent)]
    Kln(#[from] KlnError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSpec {
    Sample { n_clone: usize, n_nonclone: usize },
    Explicit(Vec<PairKey>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: PathBuf,
    /// Human-readable description of the detector adapter.
    pub detector: String,
    pub pairs: PairSpec,
    pub sizes: Vec<KlnSize>,
    pub temperature_modes: Vec<TemperatureMode>,
    pub runs_per_cell: u32,
    /// Temperature mode here is ignored; each cell sets its own.
    pub llm: LlmConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Cells in flight at once.
    pub concurrency: usize,
    pub match_mode: MatchMode,
}

impl ExperimentConfig {
    /// 10 pairs (5 clone, 5 non-clone) x sizes {4, 8} x {default, zero} x 5 runs.
    pub fn paper_matrix(corpus: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, master_seed: u64) -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            corpus: corpus.into(),
            detector: "unspecified".into(),
            pairs: PairSpec::Sample {
                n_clone: 5,
                n_nonclone: 5,
            },
            sizes: vec![KlnSize::Four, KlnSize::Eight],
            temperature_modes: vec![TemperatureMode::Default, TemperatureMode::Zero],
            runs_per_cell: 5,
            llm: LlmConfig::default(),
            output_dir: output_dir.into(),
            master_seed,
            concurrency: 4,
            match_mode: MatchMode::Normalized,
        }
    }

    fn check(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.runs_per_cell < 1 {
            return bad("runs_per_cell must be at least 1");
        }
        if self.sizes.is_empty() {
            return bad("at least one neighborhood size is required");
        }
        if self.temperature_modes.is_empty() {
            return bad("at least one temperature mode is required");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("experiment name must be a plain directory name");
        }
        Ok(())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn expected_records(&self, pairs: usize) -> usize {
        pairs * self.sizes.len() * self.temperature_modes.len() * self.runs_per_cell as usize
    }
}

/// A pair under explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPair {
    pub label: String,
    pub pair: CodePair,
    pub ground_truth: Label,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub pair_index: usize,
    pub size: KlnSize,
    pub temperature_mode: TemperatureMode,
    pub run_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecordSet {
    pub config: ExperimentConfig,
    pub pairs: Vec<TestPair>,
    pub records: Vec<ExplanationRecord>,
    pub validations: Vec<ValidationResult>,
    pub failures: Vec<CellFailure>,
    /// Cells answered from disk instead of the LLM.
    pub resumed: usize,
    /// LLM requests issued by this invocation, retries excluded.
    pub llm_requests: usize,
    pub complete: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ExperimentConfig,
    pairs: Vec<TestPair>,
    records: Vec<String>,
    failures: Vec<CellFailure>,
    complete: bool,
}

/// Seed of one cell, a stable hash of its coordinates.
pub fn cell_seed(master_seed: u64, pair: &PairKey, size: KlnSize, mode: TemperatureMode, run_index: u32) -> u64 {
    let digest = Sha256::digest(format!("klnx-cell|{master_seed}|{pair}|{size}|{mode}|{run_index}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn record_id(pair_label: &str, size: KlnSize, mode: TemperatureMode, run_index: u32) -> String {
    format!("{pair_label}-{size}-{mode}-{run_index}")
}

fn cell_dir(experiment_dir: &Path, pair_label: &str, size: KlnSize, mode: TemperatureMode, run: u32) -> PathBuf {
    experiment_dir.join(pair_label).join(format!("{size}-{mode}-{run}"))
}

/// Resolves the test pairs and their target predictions.
pub fn resolve_pairs(
    config: &ExperimentConfig,
    corpus: &Corpus,
    detector: &DetectorAdapter,
) -> Result<Vec<TestPair>, ExperimentError> {
    let pairs = match &config.pairs {
        PairSpec::Sample { n_clone, n_nonclone } => {
            sample_test_pairs(corpus, *n_clone, *n_nonclone, config.master_seed)?
        }
        PairSpec::Explicit(keys) => keys.iter().map(|k| corpus.pair(k)).collect::<Result<_, _>>()?,
    };
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, pair)| {
            let prediction = detector
                .predict(&pair, corpus)
                .map_err(|source| ExperimentError::TargetPrediction {
                    pair: pair.key(),
                    source,
                })?;
            Ok(TestPair {
                label: format!("CP{}", i + 1),
                ground_truth: pair.ground_truth(),
                pair,
                prediction,
            })
        })
        .collect()
}

struct CellOutcome {
    record: ExplanationRecord,
    validation: ValidationResult,
    resumed: bool,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    corpus: &'a Corpus,
    detector: &'a DetectorAdapter,
    backend: &'a dyn ChatBackend,
    template: &'a PromptTemplate,
    experiment_dir: PathBuf,
    requests: AtomicUsize,
}

impl Runner<'_> {
    fn run_cell(&self, target: &TestPair, cell: Cell) -> Result<CellOutcome, CellError> {
        let key = target.pair.key();
        let id = record_id(&target.label, cell.size, cell.temperature_mode, cell.run_index);
        let dir = cell_dir(&self.experiment_dir, &target.label, cell.size, cell.temperature_mode, cell.run_index);
        let path = record_path(&dir, &id);

        let existing = if path.is_file() {
            match load_record(&path) {
                Ok(record) => Some(record),
                Err(e) => {
                    warn!(record = %id, error = %e, "unreadable record, regenerating");
                    None
                }
            }
        } else {
            None
        };
        let resumed = existing.is_some();
        let record = match existing {
            Some(record) => record,
            None => {
                let seed_of = |size| cell_seed(self.config.master_seed, &key, size, cell.temperature_mode, cell.run_index);
                let base = sample_neighborhood(self.corpus, &target.pair, KlnSize::Four, seed_of(KlnSize::Four), self.detector)?;
                let neighborhood = match cell.size {
                    KlnSize::Four => base,
                    KlnSize::Eight => extend_neighborhood(&base, self.corpus, seed_of(KlnSize::Eight), self.detector)?,
                };
                let doc = build_prompt(&neighborhood, &target.prediction, self.template, self.corpus)?;
                let prompt_text = render(&doc);
                let llm = LlmConfig {
                    temperature_mode: cell.temperature_mode,
                    ..self.config.llm.clone()
                };
                let started_at = Utc::now();
                self.requests.fetch_add(1, Ordering::SeqCst);
                let raw_response = complete(&prompt_text, &llm, self.backend)?;
                let finished_at = Utc::now();
                let record = ExplanationRecord {
                    record_id: id.clone(),
                    pair_key: key.clone(),
                    size: cell.size,
                    temperature_mode: cell.temperature_mode,
                    run_index: cell.run_index,
                    seed: seed_of(cell.size),
                    target_prediction: target.prediction,
                    class_balance: neighborhood.class_balance(),
                    neighborhood,
                    prompt_text,
                    raw_response,
                    model_name: llm.model_name,
                    started_at,
                    finished_at,
                };
                save_record(&record, &dir)?;
                record
            }
        };
        let validation = validate_record(&record, &target.prediction, self.corpus, self.config.match_mode)?;
        let json = serde_json::to_vec_pretty(&validation).expect("validation serializes");
        write_atomic(&dir.join("validation.json"), &json)?;
        Ok(CellOutcome {
            record,
            validation,
            resumed,
        })
    }
}

/// Runs every cell of the matrix. Cell failures are collected, not raised.
pub fn run_matrix(
    config: &ExperimentConfig,
    corpus: &Corpus,
    detector: &DetectorAdapter,
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
) -> Result<RunRecordSet, ExperimentError> {
    config.check()?;
    let pairs = resolve_pairs(config, corpus, detector)?;
    let experiment_dir = config.experiment_dir();

    let mut cells = Vec::with_capacity(config.expected_records(pairs.len()));
    for pair_index in 0..pairs.len() {
        for &size in &config.sizes {
            for &temperature_mode in &config.temperature_modes {
                for run_index in 1..=config.runs_per_cell {
                    cells.push(Cell {
                        pair_index,
                        size,
                        temperature_mode,
                        run_index,
                    });
                }
            }
        }
    }

    let runner = Runner {
        config,
        corpus,
        detector,
        backend,
        template,
        experiment_dir: experiment_dir.clone(),
        requests: AtomicUsize::new(0),
    };
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<(usize, Result<CellOutcome, CellError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..config.concurrency.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let outcome = runner.run_cell(&pairs[cell.pair_index], cell);
                outcomes.lock().expect("outcome lock").push((i, outcome));
            });
        }
    });
    let mut outcomes = outcomes.into_inner().expect("outcome lock");
    outcomes.sort_by_key(|(i, _)| *i);

    let mut set = RunRecordSet {
        config: config.clone(),
        pairs: pairs.clone(),
        records: Vec::new(),
        validations: Vec::new(),
        failures: Vec::new(),
        resumed: 0,
        llm_requests: runner.requests.load(Ordering::SeqCst),
        complete: false,
    };
    for (i, outcome) in outcomes {
        let cell = cells[i];
        match outcome {
            Ok(o) => {
                set.resumed += o.resumed as usize;
                set.records.push(o.record);
                set.validations.push(o.validation);
            }
            Err(e) => {
                let label = &pairs[cell.pair_index].label;
                let id = record_id(label, cell.size, cell.temperature_mode, cell.run_index);
                warn!(record = %id, error = %e, "cell failed");
                set.failures.push(CellFailure {
                    cell,
                    record_id: id,
                    error: e.to_string(),
                });
            }
        }
    }
    set.complete = set.failures.is_empty() && set.records.len() == cells.len();
    info!(
        records = set.records.len(),
        failures = set.failures.len(),
        resumed = set.resumed,
        "experiment finished"
    );

    let manifest = Manifest {
        config: config.clone(),
        pairs,
        records: set.records.iter().map(|r| r.record_id.clone()).collect(),
        failures: set.failures.clone(),
        complete: set.complete,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&experiment_dir.join("manifest.json"), &json)?;
    Ok(set)
}

/// Records and validations found under an experiment directory.
#[derive(Debug, Clone, Default)]
pub struct StoredExperiment {
    pub pairs: Vec<TestPair>,
    pub records: Vec<(PathBuf, ExplanationRecord)>,
    pub validations: Vec<ValidationResult>,
}

/// Scans `experiment_dir` (the directory holding `manifest.json`).
pub fn load_experiment(experiment_dir: &Path) -> Result<StoredExperiment, ExperimentError> {
    let manifest_path = experiment_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| RecordError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RecordError::Schema {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let mut stored = StoredExperiment {
        pairs: manifest.pairs,
        ..StoredExperiment::default()
    };
    for id in &manifest.records {
        let Some(dir) = find_cell_dir(experiment_dir, id) else {
            continue;
        };
        let path = record_path(&dir, id);
        stored.records.push((dir.clone(), load_record(&path)?));
        let vpath = dir.join("validation.json");
        if vpath.is_file() {
            let text = std::fs::read_to_string(&vpath).map_err(|source| RecordError::Io {
                path: vpath.clone(),
                source,
            })?;
            let v = serde_json::from_str(&text).map_err(|e| RecordError::Schema {
                path: vpath.clone(),
                message: e.to_string(),
            })?;
            stored.validations.push(v);
        }
    }
    Ok(stored)
}

fn find_cell_dir(experiment_dir: &Path, record_id: &str) -> Option<PathBuf> {
    // record ids are `<pair label>-<size>-<mode>-<run>`
    let mut parts = record_id.rsplitn(4, '-');
    let (run, mode, size, label) = (parts.next()?, parts.next()?, parts.next()?, parts.next()?);
    let dir = experiment_dir.join(label).join(format!("{size}-{mode}-{run}"));
    dir.is_dir().then_some(dir)
}

/// Re-validates stored records and rewrites their `validation.json`.
pub fn revalidate(
    experiment_dir: &Path,
    corpus: &Corpus,
    mode: MatchMode,
) -> Result<Vec<ValidationResult>, ExperimentError> {
    let stored = load_experiment(experiment_dir)?;
    let mut out = Vec::with_capacity(stored.records.len());
    for (dir, record) in &stored.records {
        let v = validate_record(record, &record.target_prediction, corpus, mode)?;
        let json = serde_json::to_vec_pretty(&v).expect("validation serializes");
        write_atomic(&dir.join("validation.json"), &json)?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub accuracy: AccuracyTable,
    pub locations: LocationHistogram,
}

/// Accuracy table over all results plus the location histogram of one cell.
pub fn report(
    results: &[ValidationResult],
    histogram_cell: Option<CellKey>,
    bucket_width: f64,
) -> Result<ReportBundle, ExperimentError> {
    let (accuracy, locations) = aggregate(results, histogram_cell, bucket_width)?;
    Ok(ReportBundle { accuracy, locations })
}

/// Writes `accuracy.csv`, `accuracy.md`, and `locations.csv` into `dir`.
pub fn write_report(bundle: &ReportBundle, dir: &Path) -> Result<(), ExperimentError> {
    write_atomic(&dir.join("accuracy.csv"), bundle.accuracy.to_csv().as_bytes())?;
    write_atomic(&dir.join("accuracy.md"), bundle.accuracy.to_markdown().as_bytes())?;
    write_atomic(&dir.join("locations.csv"), bundle.locations.to_csv().as_bytes())?;
    Ok(())
}
