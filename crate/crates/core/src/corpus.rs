//! Corpus ingestion, the clone/non-clone pair universe, and test-pair sampling.
//!
//! A corpus is a set of questions, each holding the solution files submitted
//! for it. Two solutions to the same question form a clone pair; solutions to
//! different questions form a non-clone pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

/// Separator between the two snippet ids of a [`PairKey`].
pub const PAIR_KEY_SEPARATOR: char = '|';

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("corpus at {0} contains no snippets")]
    Empty(PathBuf),
    #[error("duplicate snippet id `{0}`")]
    DuplicateId(String),
    #[error("snippet id `{0}` contains the reserved character `|`")]
    ReservedCharacter(String),
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snippet {0} has no non-empty lines")]
    EmptySnippet(PathBuf),
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown snippet id `{0}`")]
    UnknownSnippet(String),
    #[error("a pair needs two distinct snippets, got `{0}` twice")]
    SelfPair(String),
    #[error("malformed pair key `{0}`")]
    MalformedPairKey(String),
    #[error("infeasible sample: {0}")]
    Infeasible(String),
}

/// Clone detection label, shared by ground truth, predictions, and verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Clone,
    NonClone,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Clone => Label::NonClone,
            Label::NonClone => Label::Clone,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Clone => "clone",
            Label::NonClone => "non-clone",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clone" | "1" | "true" => Ok(Label::Clone),
            "non-clone" | "nonclone" | "non_clone" | "0" | "false" => Ok(Label::NonClone),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// One solution file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub question_id: String,
    pub source_path: PathBuf,
    /// Lines as read from disk, without line terminators.
    pub lines: Vec<String>,
}

impl Snippet {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    pub fn key(&self) -> SnippetRef {
        SnippetRef {
            id: self.id.clone(),
            question_id: self.question_id.clone(),
        }
    }
}

/// Lightweight reference to a snippet: its id and its category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SnippetRef {
    pub id: String,
    pub question_id: String,
}

/// Canonical identity of an unordered pair: `min_id|max_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PairKey {
    a: String,
    b: String,
}

impl PairKey {
    pub fn new(x: &str, y: &str) -> Result<Self, CorpusError> {
        if x == y {
            return Err(CorpusError::SelfPair(x.to_string()));
        }
        for id in [x, y] {
            if id.is_empty() || id.contains(PAIR_KEY_SEPARATOR) {
                return Err(CorpusError::MalformedPairKey(format!("{x}{PAIR_KEY_SEPARATOR}{y}")));
            }
        }
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        Ok(PairKey {
            a: a.to_string(),
            b: b.to_string(),
        })
    }

    pub fn first(&self) -> &str {
        &self.a
    }

    pub fn second(&self) -> &str {
        &self.b
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.a, PAIR_KEY_SEPARATOR, self.b)
    }
}

impl FromStr for PairKey {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (x, y) = s
            .trim()
            .split_once(PAIR_KEY_SEPARATOR)
            .ok_or_else(|| CorpusError::MalformedPairKey(s.to_string()))?;
        PairKey::new(x.trim(), y.trim())
    }
}

impl TryFrom<String> for PairKey {
    type Error = CorpusError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<PairKey> for String {
    fn from(key: PairKey) -> String {
        key.to_string()
    }
}

/// Unordered pair of snippets. `a` always carries the lexicographically
/// smaller id, so two pairs over the same snippets compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodePair {
    pub a: SnippetRef,
    pub b: SnippetRef,
}

impl CodePair {
    pub fn new(x: SnippetRef, y: SnippetRef) -> Result<Self, CorpusError> {
        if x.id == y.id {
            return Err(CorpusError::SelfPair(x.id));
        }
        Ok(if x.id < y.id {
            CodePair { a: x, b: y }
        } else {
            CodePair { a: y, b: x }
        })
    }

    pub fn key(&self) -> PairKey {
        PairKey {
            a: self.a.id.clone(),
            b: self.b.id.clone(),
        }
    }

    /// Clone iff both snippets answer the same question.
    pub fn ground_truth(&self) -> Label {
        if self.a.question_id == self.b.question_id {
            Label::Clone
        } else {
            Label::NonClone
        }
    }

    pub fn contains(&self, snippet_id: &str) -> bool {
        self.a.id == snippet_id || self.b.id == snippet_id
    }
}

/// Free-function form of [`CodePair::ground_truth`].
pub fn ground_truth(pair: &CodePair) -> Label {
    pair.ground_truth()
}

/// Immutable set of questions and their solution snippets.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    questions: BTreeMap<String, Vec<Arc<Snippet>>>,
    by_id: HashMap<String, Arc<Snippet>>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    snippet_id: String,
    question_id: String,
    path: PathBuf,
}

impl Corpus {
    /// Builds a corpus from already-read snippets.
    pub fn from_snippets(
        root: impl Into<PathBuf>,
        snippets: impl IntoIterator<Item = Snippet>,
    ) -> Result<Self, CorpusError> {
        let root = root.into();
        let mut questions: BTreeMap<String, Vec<Arc<Snippet>>> = BTreeMap::new();
        let mut by_id = HashMap::new();
        for snippet in snippets {
            if snippet.id.contains(PAIR_KEY_SEPARATOR) {
                return Err(CorpusError::ReservedCharacter(snippet.id));
            }
            if snippet.lines.iter().all(|l| l.trim().is_empty()) {
                return Err(CorpusError::EmptySnippet(snippet.source_path));
            }
            let snippet = Arc::new(snippet);
            if by_id.insert(snippet.id.clone(), snippet.clone()).is_some() {
                return Err(CorpusError::DuplicateId(snippet.id.clone()));
            }
            questions
                .entry(snippet.question_id.clone())
                .or_default()
                .push(snippet);
        }
        if by_id.is_empty() {
            return Err(CorpusError::Empty(root));
        }
        for list in questions.values_mut() {
            list.sort_by(|x, y| x.id.cmp(&y.id));
        }
        Ok(Corpus {
            root,
            questions,
            by_id,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn total_snippets(&self) -> usize {
        self.by_id.len()
    }

    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.questions.keys().map(String::as_str)
    }

    pub fn questions(&self) -> &BTreeMap<String, Vec<Arc<Snippet>>> {
        &self.questions
    }

    pub fn question(&self, question_id: &str) -> Option<&[Arc<Snippet>]> {
        self.questions.get(question_id).map(Vec::as_slice)
    }

    pub fn snippet(&self, id: &str) -> Option<&Arc<Snippet>> {
        self.by_id.get(id)
    }

    /// All snippets ordered by (question id, snippet id).
    pub fn snippets(&self) -> impl Iterator<Item = &Arc<Snippet>> {
        self.questions.values().flatten()
    }

    /// Resolves a pair key against this corpus.
    pub fn pair(&self, key: &PairKey) -> Result<CodePair, CorpusError> {
        let a = self
            .snippet(key.first())
            .ok_or_else(|| CorpusError::UnknownSnippet(key.first().to_string()))?;
        let b = self
            .snippet(key.second())
            .ok_or_else(|| CorpusError::UnknownSnippet(key.second().to_string()))?;
        CodePair::new(a.key(), b.key())
    }

    /// Looks up both snippets of a pair.
    pub fn pair_snippets(&self, pair: &CodePair) -> Result<(&Arc<Snippet>, &Arc<Snippet>), CorpusError> {
        let a = self
            .snippet(&pair.a.id)
            .ok_or_else(|| CorpusError::UnknownSnippet(pair.a.id.clone()))?;
        let b = self
            .snippet(&pair.b.id)
            .ok_or_else(|| CorpusError::UnknownSnippet(pair.b.id.clone()))?;
        Ok((a, b))
    }
}

/// Loads a corpus from `<root>/<question_id>/<file>` or from a manifest file.
///
/// A manifest is a `.json` array or a `.csv` table of
/// `{snippet_id, question_id, path}` records; relative paths resolve against
/// the manifest's directory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::MissingPath(path.to_path_buf()));
    }
    if path.is_dir() {
        load_directory(path)
    } else {
        load_manifest(path)
    }
}

fn load_directory(root: &Path) -> Result<Corpus, CorpusError> {
    let unreadable = |path: &Path, source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let mut snippets = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| unreadable(root, e))?;
    let mut question_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| unreadable(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().is_dir() {
            continue;
        }
        question_dirs.push((name, entry.path()));
    }
    question_dirs.sort();
    for (question_id, dir) in question_dirs {
        for entry in WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&dir).to_path_buf();
                CorpusError::Unreadable {
                    path,
                    source: e.into(),
                }
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
            if rel
                .components()
                .any(|c| c.as_os_str().to_string_lossy().starts_with('.'))
            {
                continue;
            }
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            snippets.push(read_snippet(id, question_id.clone(), entry.path())?);
        }
    }
    Corpus::from_snippets(root, snippets)
}

fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let manifest_error = |message: String| CorpusError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let entries: Vec<ManifestEntry> = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => csv::Reader::from_reader(raw.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| manifest_error(e.to_string()))?,
        _ => serde_json::from_str(&raw).map_err(|e| manifest_error(e.to_string()))?,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let snippets = entries
        .into_iter()
        .map(|entry| {
            let file = if entry.path.is_absolute() {
                entry.path
            } else {
                base.join(entry.path)
            };
            read_snippet(entry.snippet_id, entry.question_id, &file)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::from_snippets(base, snippets)
}

fn read_snippet(id: String, question_id: String, path: &Path) -> Result<Snippet, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<String> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    // A trailing newline does not open a new line.
    let lines = match lines.split_last() {
        Some((last, rest)) if last.is_empty() => rest.to_vec(),
        _ => lines,
    };
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(CorpusError::EmptySnippet(path.to_path_buf()));
    }
    Ok(Snippet {
        id,
        question_id,
        source_path: path.to_path_buf(),
        lines,
    })
}

/// n choose 2.
pub fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Number of clone and non-clone pairs in the corpus.
pub fn pair_counts(corpus: &Corpus) -> (u64, u64) {
    let clone: u64 = corpus
        .questions
        .values()
        .map(|list| choose2(list.len() as u64))
        .sum();
    let all = choose2(corpus.total_snippets() as u64);
    (clone, all - clone)
}

/// Samples `n_clone` clone pairs, each from a different question, followed by
/// `n_nonclone` distinct non-clone pairs. Deterministic for a fixed seed.
pub fn sample_test_pairs(
    corpus: &Corpus,
    n_clone: usize,
    n_nonclone: usize,
    seed: u64,
) -> Result<Vec<CodePair>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eligible: Vec<&Vec<Arc<Snippet>>> =
        corpus.questions.values().filter(|l| l.len() >= 2).collect();
    if eligible.len() < n_clone {
        return Err(CorpusError::Infeasible(format!(
            "{n_clone} clone pairs from distinct questions requested but only {} questions have two or more snippets",
            eligible.len()
        )));
    }
    let (_, nonclone_total) = pair_counts(corpus);
    if (n_nonclone as u64) > nonclone_total {
        return Err(CorpusError::Infeasible(format!(
            "{n_nonclone} non-clone pairs requested but the corpus has {nonclone_total}"
        )));
    }

    let mut pairs = Vec::with_capacity(n_clone + n_nonclone);
    eligible.shuffle(&mut rng);
    for list in eligible.into_iter().take(n_clone) {
        let picked = index::sample(&mut rng, list.len(), 2);
        pairs.push(CodePair::new(list[picked.index(0)].key(), list[picked.index(1)].key())?);
    }

    let all: Vec<&Arc<Snippet>> = corpus.snippets().collect();
    let mut seen = BTreeSet::new();
    while seen.len() < n_nonclone {
        let picked = index::sample(&mut rng, all.len(), 2);
        let (x, y) = (all[picked.index(0)], all[picked.index(1)]);
        if x.question_id == y.question_id {
            continue;
        }
        let pair = CodePair::new(x.key(), y.key())?;
        if seen.insert(pair.clone()) {
            pairs.push(pair);
        }
    }
    Ok(pairs)
}
