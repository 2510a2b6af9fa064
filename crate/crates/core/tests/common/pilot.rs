//! A 20-item review session: ten pairs at sizes 4 and 8 with planned
//! judgments (15 correct, one bad explanation at size 4, three disputes).

use std::collections::HashMap;

use klnx::corpus::Corpus;
use klnx::detector::{DetectorAdapter, StubDetector};
use klnx::experiment::{run_matrix, ExperimentConfig, RunRecordSet};
use klnx::kln::KlnSize;
use klnx::llm::{MockBackend, SyntheticExplainer, TemperatureMode};
use klnx::prompt::PromptTemplate;
use klnx::review::{
    create_session, BadReason, Correctness, ItemSource, ItemStatus, Judgment, Quality, Resolution, ReviewSession,
    SessionEvent, SessionStore,
};

use super::fixture;

/// Ten pairs at sizes 4 and 8, one zero-temperature run each.
pub fn twenty_records(corpus: &Corpus) -> (RunRecordSet, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::paper_matrix(fixture("corpus_matrix"), dir.path(), 9);
    cfg.temperature_modes = vec![TemperatureMode::Zero];
    cfg.runs_per_cell = 1;
    let set = run_matrix(
        &cfg,
        corpus,
        &DetectorAdapter::Stub(StubDetector::echo()),
        &MockBackend::synthetic(SyntheticExplainer::default()),
        &PromptTemplate::default(),
    )
    .unwrap();
    assert_eq!(set.records.len(), 20);
    (set, dir)
}

pub fn session(corpus: &Corpus, set: &RunRecordSet) -> ReviewSession {
    let sources: Vec<ItemSource<'_>> = set
        .records
        .iter()
        .map(|r| {
            let pair = set.pairs.iter().find(|p| p.pair.key() == r.pair_key).unwrap();
            ItemSource {
                record: r,
                pair_label: pair.label.clone(),
                prediction: pair.prediction,
            }
        })
        .collect();
    let mut texts = HashMap::new();
    texts.insert("brattleship".to_string(), "Sink a hidden ship on an R x C board.".to_string());
    create_session(
        "pilot",
        &sources,
        vec!["main".into(), "second".into()],
        vec!["third".into()],
        corpus,
        &texts,
    )
    .unwrap()
}

pub fn judgment(v: &str, c: Correctness, q: Quality) -> Judgment {
    Judgment {
        validator_id: v.into(),
        correctness: c,
        quality: q,
        bad_reason: (q == Quality::Bad).then_some(BadReason::NoExample),
        bad_line_examples: false,
        notes: String::new(),
    }
}

/// Final labels: 5 incorrect of 20; one bad explanation, at size 4.
pub fn planned(index: usize, size: KlnSize) -> (Correctness, Quality) {
    let c = if [1, 4, 9, 12, 17].contains(&index) { Correctness::Incorrect } else { Correctness::Correct };
    let q = if size == KlnSize::Four && index == 6 { Quality::Bad } else { Quality::Good };
    (c, q)
}

/// Items where the second validator first disagreed and the third resolved.
pub const DISPUTED: [usize; 3] = [3, 6, 12];

pub fn judge_all(store: &SessionStore, id: &str) {
    let s = store.get(id).unwrap();
    for (i, item) in s.items.iter().enumerate() {
        let (c, q) = planned(i, item.size);
        store.apply(id, SessionEvent::Judgment { item: i, judgment: judgment("main", c, q) }).unwrap();
        let second = if DISPUTED.contains(&i) {
            let flipped = if c == Correctness::Correct { Correctness::Incorrect } else { Correctness::Correct };
            judgment("second", flipped, q)
        } else {
            judgment("second", c, q)
        };
        let after = store.apply(id, SessionEvent::Judgment { item: i, judgment: second }).unwrap();
        if DISPUTED.contains(&i) {
            assert_eq!(after.status(), ItemStatus::Disputed);
            let resolution = Resolution {
                resolver_id: "third".into(),
                judgment: judgment("third", c, q),
                note: "checked against the question text".into(),
            };
            let done = store.apply(id, SessionEvent::Resolution { item: i, resolution }).unwrap();
            assert_eq!(done.status(), ItemStatus::Complete);
        } else {
            assert_eq!(after.status(), ItemStatus::Complete);
        }
    }
}
