//! Automated checks of LLM explanations.
//!
//! An explanation is judged against the detector's prediction: its verdict
//! must agree with the predicted label, and each cited code line must occur
//! in the snippet it was attributed to.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Label, PairKey, Snippet};
use crate::detector::Prediction;
use crate::kln::KlnSize;
use crate::llm::{ExplanationRecord, TemperatureMode};

/// Lines the instruction asks for per snippet.
pub const EXPECTED_LINES: usize = 5;

pub const DEFAULT_BUCKET_WIDTH: f64 = 2.5;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("bucket width must be in (0, 100], got {0}")]
    BucketWidth(f64),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Clone,
    NonClone,
    Indeterminate,
}

impl Verdict {
    pub fn agrees_with(self, label: Label) -> bool {
        matches!(
            (self, label),
            (Verdict::Clone, Label::Clone) | (Verdict::NonClone, Label::NonClone)
        )
    }
}

/// Verdict with the occurrence counts that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictScan {
    pub verdict: Verdict,
    pub positive: usize,
    pub negative: usize,
}

static NEGATIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bnon[\s-]?clon(?:e|es|ed)\b|\bnot\s+(?:a\s+)?clon(?:e|es|ed)\b").unwrap()
});
static POSITIVE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bclon(?:e|es|ed)\b").unwrap());

/// Counts verdict words. Negative forms ("non-clone", "not a clone", ...)
/// win over any number of bare "clone" mentions. "clone" used as a modifier
/// of "detection"/"detector" is not a verdict.
pub fn scan_verdict(response: &str) -> VerdictScan {
    let negatives: Vec<(usize, usize)> = NEGATIVE
        .find_iter(response)
        .map(|m| (m.start(), m.end()))
        .collect();
    let positive = POSITIVE
        .find_iter(response)
        .filter(|m| !negatives.iter().any(|&(s, e)| m.start() >= s && m.end() <= e))
        .filter(|m| {
            let rest = response[m.end()..].trim_start_matches([' ', '-', '\t']);
            !rest
                .get(..6)
                .is_some_and(|w| w.eq_ignore_ascii_case("detect"))
        })
        .count();
    let negative = negatives.len();
    let verdict = if negative > 0 {
        Verdict::NonClone
    } else if positive > 0 {
        Verdict::Clone
    } else {
        Verdict::Indeterminate
    };
    VerdictScan {
        verdict,
        positive,
        negative,
    }
}

pub fn extract_verdict(response: &str) -> Verdict {
    scan_verdict(response).verdict
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    First,
    Second,
}

static FIRST_HEADING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:code(?:\s+snippet)?\s*(?:#\s*)?(?:1|a|one)|snippet\s*(?:#\s*)?(?:1|a|one)|first\s+(?:code(?:\s+snippet)?|snippet))\b").unwrap()
});
static SECOND_HEADING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:code(?:\s+snippet)?\s*(?:#\s*)?(?:2|b|two)|snippet\s*(?:#\s*)?(?:2|b|two)|second\s+(?:code(?:\s+snippet)?|snippet))\b").unwrap()
});
static LIST_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*+]|\d+[.)])\s+").unwrap());

enum LineKind {
    Heading(Option<Side>),
    Other,
}

fn classify_line(line: &str) -> LineKind {
    let t = line.trim();
    let is_markdown_heading = t.starts_with('#');
    let is_bold_line = t.starts_with("**") && t.trim_end_matches(':').ends_with("**");
    let is_label_line = t.ends_with(':') && t.len() <= 80 && !LIST_ITEM.is_match(t);
    if !(is_markdown_heading || is_bold_line || is_label_line) {
        return LineKind::Other;
    }
    let first = FIRST_HEADING.is_match(t);
    let second = SECOND_HEADING.is_match(t);
    let side = match (first, second) {
        (true, false) => Some(Side::First),
        (false, true) => Some(Side::Second),
        _ => None,
    };
    if side.is_none() && !(is_markdown_heading || is_bold_line) {
        return LineKind::Other;
    }
    LineKind::Heading(side)
}

/// Content of the first inline code span in `line`.
fn first_code_span(line: &str) -> Option<&str> {
    let start = line.find('`')?;
    let ticks = line[start..].chars().take_while(|&c| c == '`').count();
    let fence = &line[start..start + ticks];
    let body_start = start + ticks;
    let end = line[body_start..].find(fence)? + body_start;
    let body = line[body_start..end].trim();
    (!body.is_empty()).then_some(body)
}

fn fence_marker(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let ch = t.chars().next()?;
    if ch != '`' && ch != '~' {
        return None;
    }
    let n = t.chars().take_while(|&c| c == ch).count();
    (n >= 3).then(|| &t[..n])
}

/// Code lines cited for the first and the second snippet.
///
/// The response is split at headings naming a snippet ("Code 1",
/// "Snippet B", "second code", ...). Inside each section, non-blank lines of
/// fenced blocks and the first inline code span of each list item are
/// collected in order. If no section headings exist but the response holds
/// exactly two fenced blocks, they are taken as the first and second
/// snippet. A response without code yields two empty lists.
pub fn extract_code_lines(response: &str) -> (Vec<String>, Vec<String>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut current: Option<Side> = None;
    let mut saw_heading = false;
    let mut fence: Option<String> = None;
    let mut blocks: Vec<Vec<String>> = Vec::new();

    for line in response.lines() {
        if let Some(open) = &fence {
            if fence_marker(line).is_some_and(|m| m.starts_with(open.as_str()) && line.trim().len() == m.len()) {
                fence = None;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let text = line.trim().to_string();
            blocks.last_mut().expect("block opened with fence").push(text.clone());
            match current {
                Some(Side::First) => first.push(text),
                Some(Side::Second) => second.push(text),
                None => {}
            }
            continue;
        }
        if let Some(marker) = fence_marker(line) {
            fence = Some(marker.to_string());
            blocks.push(Vec::new());
            continue;
        }
        match classify_line(line) {
            LineKind::Heading(side) => {
                saw_heading |= side.is_some();
                current = side;
            }
            LineKind::Other => {
                if LIST_ITEM.is_match(line) {
                    if let Some(span) = first_code_span(line) {
                        match current {
                            Some(Side::First) => first.push(span.to_string()),
                            Some(Side::Second) => second.push(span.to_string()),
                            None => {}
                        }
                    }
                }
            }
        }
    }

    if !saw_heading && blocks.len() == 2 {
        let mut blocks = blocks.into_iter();
        return (blocks.next().unwrap(), blocks.next().unwrap());
    }
    (first, second)
}

/// How extracted lines are compared with snippet lines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Trim both ends and collapse internal whitespace runs; case-sensitive.
    #[default]
    Normalized,
    /// Trim both ends only.
    Strict,
}

pub fn normalize_line(line: &str, mode: MatchMode) -> String {
    match mode {
        MatchMode::Normalized => line.split_whitespace().collect::<Vec<_>>().join(" "),
        MatchMode::Strict => line.trim().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineMatch {
    pub extracted_line: String,
    pub matched: bool,
    /// 1-based line of the first occurrence.
    pub line_index: Option<usize>,
    /// `line_index * 100 / line_count`.
    pub location_percent: Option<f64>,
    /// How many snippet lines equal the extracted line.
    pub occurrences: usize,
}

/// Looks up each extracted line in `snippet`.
pub fn match_lines(lines: &[String], snippet: &Snippet, mode: MatchMode) -> Vec<LineMatch> {
    let normalized: Vec<String> = snippet.lines.iter().map(|l| normalize_line(l, mode)).collect();
    let count = snippet.line_count();
    lines
        .iter()
        .map(|line| {
            let needle = normalize_line(line, mode);
            let mut hits = normalized
                .iter()
                .enumerate()
                .filter(|(_, l)| !needle.is_empty() && **l == needle)
                .map(|(i, _)| i + 1);
            let first = hits.next();
            let occurrences = first.map_or(0, |_| 1 + hits.count());
            LineMatch {
                extracted_line: line.clone(),
                matched: first.is_some(),
                line_index: first,
                location_percent: first.map(|i| i as f64 * 100.0 / count as f64),
                occurrences,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub record_id: String,
    pub pair_key: PairKey,
    pub size: KlnSize,
    pub temperature_mode: TemperatureMode,
    pub run_index: u32,
    /// Used only to split reports by class.
    pub ground_truth: Label,
    pub predicted: Label,
    pub verdict: Verdict,
    pub verdict_scan: VerdictScan,
    pub verdict_correct: bool,
    pub lines_a: Vec<LineMatch>,
    pub lines_b: Vec<LineMatch>,
    /// Set when either snippet did not get exactly five lines.
    pub line_count_flag: bool,
    pub all_lines_correct: bool,
}

impl ValidationResult {
    pub fn matches(&self) -> impl Iterator<Item = &LineMatch> {
        self.lines_a.iter().chain(&self.lines_b)
    }
}

/// Validates one record against the detector's prediction for its pair.
pub fn validate_record(
    record: &ExplanationRecord,
    prediction: &Prediction,
    corpus: &Corpus,
    mode: MatchMode,
) -> Result<ValidationResult, ValidateError> {
    let pair = corpus.pair(&record.pair_key)?;
    let (snippet_a, snippet_b) = corpus.pair_snippets(&pair)?;
    let scan = scan_verdict(&record.raw_response);
    let (extracted_a, extracted_b) = extract_code_lines(&record.raw_response);
    let lines_a = match_lines(&extracted_a, snippet_a, mode);
    let lines_b = match_lines(&extracted_b, snippet_b, mode);
    let line_count_flag = lines_a.len() != EXPECTED_LINES || lines_b.len() != EXPECTED_LINES;
    let all_lines_correct = !line_count_flag && lines_a.iter().chain(&lines_b).all(|m| m.matched);
    Ok(ValidationResult {
        record_id: record.record_id.clone(),
        pair_key: record.pair_key.clone(),
        size: record.size,
        temperature_mode: record.temperature_mode,
        run_index: record.run_index,
        ground_truth: pair.ground_truth(),
        predicted: prediction.label,
        verdict: scan.verdict,
        verdict_scan: scan,
        verdict_correct: scan.verdict.agrees_with(prediction.label),
        lines_a,
        lines_b,
        line_count_flag,
        all_lines_correct,
    })
}

/// A count out of a total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
}

impl Ratio {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.hits += hit as usize;
    }

    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64 * 100.0)
    }

    fn display(&self) -> String {
        self.percent()
            .map_or_else(|| "n/a".to_string(), |p| format!("{p:.0}%"))
    }
}

/// Table column: one (temperature mode, size) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub temperature_mode: TemperatureMode,
    pub size: KlnSize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub explanation: Ratio,
    pub clone_pairs: Ratio,
    pub non_clone_pairs: Ratio,
    /// Matched lines over cited lines.
    pub code_lines: Ratio,
}

/// Explanation accuracy per (temperature mode, size) column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub cells: BTreeMap<CellKey, AccuracyCell>,
}

const ROWS: [&str; 4] = [
    "Explanation correctness",
    "- Clone pairs",
    "- Non-clone pairs",
    "Sampled code line correctness",
];

impl AccuracyTable {
    fn row(cell: &AccuracyCell, i: usize) -> &Ratio {
        match i {
            0 => &cell.explanation,
            1 => &cell.clone_pairs,
            2 => &cell.non_clone_pairs,
            _ => &cell.code_lines,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Result |");
        for key in self.cells.keys() {
            let _ = write!(out, " Temp={} Size-{} |", key.temperature_mode, key.size);
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.cells.len()));
        out.push('\n');
        for (i, name) in ROWS.iter().enumerate() {
            let _ = write!(out, "| {name} |");
            for cell in self.cells.values() {
                let _ = write!(out, " {} |", Self::row(cell, i).display());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,temperature,size,hits,total,percent\n");
        for (i, name) in ROWS.iter().enumerate() {
            for (key, cell) in &self.cells {
                let r = Self::row(cell, i);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    name.trim_start_matches("- "),
                    key.temperature_mode,
                    key.size,
                    r.hits,
                    r.total,
                    r.percent().map_or(String::new(), |p| format!("{p:.4}"))
                );
            }
        }
        out
    }
}

/// Histogram of location percents of matched lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationHistogram {
    pub bucket_width: f64,
    /// `counts[k]` covers `(k * width, (k + 1) * width]`.
    pub counts: Vec<usize>,
    pub filter: Option<CellKey>,
}

impl LocationHistogram {
    pub fn new(bucket_width: f64, filter: Option<CellKey>) -> Result<Self, ValidateError> {
        if !(bucket_width > 0.0 && bucket_width <= 100.0) {
            return Err(ValidateError::BucketWidth(bucket_width));
        }
        let buckets = (100.0 / bucket_width).ceil() as usize;
        Ok(LocationHistogram {
            bucket_width,
            counts: vec![0; buckets],
            filter,
        })
    }

    pub fn add(&mut self, percent: f64) {
        let k = ((percent / self.bucket_width).ceil() as usize).saturating_sub(1);
        let last = self.counts.len() - 1;
        self.counts[k.min(last)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_start,bucket_end,count\n");
        for (k, count) in self.counts.iter().enumerate() {
            let lo = k as f64 * self.bucket_width;
            let hi = ((k + 1) as f64 * self.bucket_width).min(100.0);
            let _ = writeln!(out, "{lo},{hi},{count}");
        }
        out
    }
}

/// Builds the accuracy table over all results and the location histogram
/// over the matched lines of `histogram_cell` (all cells when `None`).
pub fn aggregate(
    results: &[ValidationResult],
    histogram_cell: Option<CellKey>,
    bucket_width: f64,
) -> Result<(AccuracyTable, LocationHistogram), ValidateError> {
    if results.is_empty() {
        return Err(ValidateError::Empty);
    }
    let mut table = AccuracyTable::default();
    let mut histogram = LocationHistogram::new(bucket_width, histogram_cell)?;
    for r in results {
        let key = CellKey {
            temperature_mode: r.temperature_mode,
            size: r.size,
        };
        let cell = table.cells.entry(key).or_default();
        cell.explanation.add(r.verdict_correct);
        match r.ground_truth {
            Label::Clone => cell.clone_pairs.add(r.verdict_correct),
            Label::NonClone => cell.non_clone_pairs.add(r.verdict_correct),
        }
        for m in r.matches() {
            cell.code_lines.add(m.matched);
        }
        if histogram_cell.is_none_or(|k| k == key) {
            for p in r.matches().filter_map(|m| m.location_percent) {
                histogram.add(p);
            }
        }
    }
    Ok((table, histogram))
}
