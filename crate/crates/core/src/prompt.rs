//! Four-part prompt assembly: context, dataset, question, instruction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Label};
use crate::detector::Prediction;
use crate::kln::NeighborhoodSet;

/// Directive every instruction must carry, verbatim.
pub const FIVE_LINE_DIRECTIVE: &str =
    "Show five lines from each code snippet that contribute the most to the model's prediction";

/// Heading that marks the pair being explained in the rendered dataset.
pub const TARGET_HEADING: &str = "### Target code pair (explain this prediction)";

const PLACEHOLDERS: [&str; 5] = ["CONTEXT", "SAMPLES", "TARGET", "QUESTION", "INSTRUCTION"];

const DEFAULT_TEMPLATE: &str = include_str!("../templates/default.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template section `{0}` is empty")]
    MissingSection(&'static str),
    #[error("template layout must contain {{{0}}} exactly once")]
    Placeholder(&'static str),
    #[error("instruction does not contain the five-line directive")]
    MissingDirective,
    #[error("cannot read template {path}: {message}")]
    Template { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub layout: String,
    pub context: String,
    pub question: String,
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::Template {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Template {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| PromptError::Template {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn check(&self) -> Result<(), PromptError> {
        for (name, text) in [
            ("context", &self.context),
            ("question", &self.question),
            ("instruction", &self.instruction),
            ("layout", &self.layout),
        ] {
            if text.trim().is_empty() {
                return Err(PromptError::MissingSection(name));
            }
        }
        for name in PLACEHOLDERS {
            if self.layout.matches(&format!("{{{name}}}")).count() != 1 {
                return Err(PromptError::Placeholder(name));
            }
        }
        if !self.instruction.contains(FIVE_LINE_DIRECTIVE) {
            return Err(PromptError::MissingDirective);
        }
        Ok(())
    }
}

/// One code pair as shown to the model, with the detector's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub code_a: String,
    pub code_b: String,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub layout: String,
    pub context: String,
    pub dataset_entries: Vec<PromptEntry>,
    pub target_entry: PromptEntry,
    pub question: String,
    pub instruction: String,
}

/// Fills the template with the neighborhood samples and the target pair.
pub fn build_prompt(
    neighborhood: &NeighborhoodSet,
    target_prediction: &Prediction,
    template: &PromptTemplate,
    corpus: &Corpus,
) -> Result<PromptDocument, PromptError> {
    template.check()?;
    let entry = |pair, prediction: &Prediction| -> Result<PromptEntry, PromptError> {
        let (a, b) = corpus.pair_snippets(pair)?;
        Ok(PromptEntry {
            code_a: a.text(),
            code_b: b.text(),
            label: prediction.label,
            confidence: prediction.confidence,
        })
    };
    let dataset_entries = neighborhood
        .samples
        .iter()
        .map(|s| entry(&s.pair, &s.prediction))
        .collect::<Result<Vec<_>, _>>()?;
    let target_entry = entry(&neighborhood.target, target_prediction)?;
    let question = substitute(
        template.question.trim(),
        &[("PREDICTION", target_prediction.label.as_str())],
    );
    Ok(PromptDocument {
        layout: template.layout.trim().to_string(),
        context: template.context.trim().to_string(),
        dataset_entries,
        target_entry,
        question,
        instruction: template.instruction.trim().to_string(),
    })
}

/// Confidence at fixed precision.
pub fn format_confidence(confidence: f64) -> String {
    format!("{confidence:.4}")
}

/// Renders the document. Output is a pure function of the document.
pub fn render(doc: &PromptDocument) -> String {
    let samples = doc
        .dataset_entries
        .iter()
        .enumerate()
        .map(|(i, e)| render_entry(&format!("### Example {}", i + 1), e))
        .collect::<Vec<_>>()
        .join("\n\n");
    let target = render_entry(TARGET_HEADING, &doc.target_entry);
    let mut text = substitute(
        &doc.layout,
        &[
            ("CONTEXT", &doc.context),
            ("SAMPLES", &samples),
            ("TARGET", &target),
            ("QUESTION", &doc.question),
            ("INSTRUCTION", &doc.instruction),
        ],
    );
    text.push('\n');
    text
}

fn render_entry(heading: &str, entry: &PromptEntry) -> String {
    format!(
        "{heading}\n\nCode 1:\n{}\n\nCode 2:\n{}\n\nModel prediction: {}\nConfidence: {}",
        fenced(&entry.code_a),
        fenced(&entry.code_b),
        entry.label,
        format_confidence(entry.confidence),
    )
}

/// Wraps code in a backtick fence longer than any backtick run inside it.
fn fenced(code: &str) -> String {
    let longest = code
        .split(|c| c != '`')
        .map(str::len)
        .max()
        .unwrap_or(0);
    let fence = "`".repeat(longest.max(2) + 1);
    format!("{fence}\n{code}\n{fence}")
}

/// Replaces `{NAME}` tokens in one left-to-right pass; inserted values are
/// never rescanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = values.iter().find_map(|(name, value)| {
            let token = format!("{{{name}}}");
            tail.starts_with(&token).then(|| (token.len(), *value))
        });
        match hit {
            Some((len, value)) => {
                out.push_str(value);
                rest = &tail[len..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Target pair as read back from a rendered prompt: the two code texts and
/// the detector label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTarget {
    pub code_a: Vec<String>,
    pub code_b: Vec<String>,
    pub label: Label,
}

/// Reads the target entry back out of a prompt produced by [`render`].
pub fn parse_rendered_target(prompt: &str) -> Option<RenderedTarget> {
    let start = prompt.find(TARGET_HEADING)?;
    let mut lines = prompt[start + TARGET_HEADING.len()..].lines();
    let mut blocks = Vec::new();
    while blocks.len() < 2 {
        let line = lines.next()?;
        if line.starts_with("```") {
            let fence = line.trim_end();
            let mut block = Vec::new();
            loop {
                let inner = lines.next()?;
                if inner == fence {
                    break;
                }
                block.push(inner.to_string());
            }
            blocks.push(block);
        }
    }
    let label = lines
        .find_map(|l| l.strip_prefix("Model prediction: "))?
        .parse()
        .ok()?;
    let code_b = blocks.pop()?;
    let code_a = blocks.pop()?;
    Some(RenderedTarget { code_a, code_b, label })
}
