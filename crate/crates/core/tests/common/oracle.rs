//! Brute-force references shared by the integration and acceptance tests.

use std::collections::BTreeSet;

use klnx::corpus::{CodePair, Corpus, Label};
use klnx::kln::{classify_degree, eligible_candidates, Degree, KlnSize};
use klnx::llm::TemperatureMode;
use klnx::validate::{aggregate, CellKey, LineMatch, ValidationResult, DEFAULT_BUCKET_WIDTH};

pub fn all_pairs(corpus: &Corpus) -> Vec<CodePair> {
    let all: Vec<_> = corpus.snippets().collect();
    let mut out = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            out.push(CodePair::new(all[i].key(), all[j].key()).unwrap());
        }
    }
    out
}

/// Question of each side of a pair.
fn qs(p: &CodePair) -> (&str, &str) {
    (&p.a.question_id, &p.b.question_id)
}

/// Reference classification written from the degree definitions.
pub fn oracle_degree(target: &CodePair, c: &CodePair) -> Degree {
    let (ca, cb) = qs(c);
    let (ta, tb) = qs(target);
    if ta == tb {
        let hits = [ca, cb].iter().filter(|q| **q == ta).count();
        [Degree::Null, Degree::Medium, Degree::High][hits]
    } else if (ca == ta && cb == tb) || (ca == tb && cb == ta) {
        Degree::High
    } else if ca == cb && ca != ta && ca != tb {
        Degree::Null
    } else {
        Degree::Medium
    }
}

/// Pairs the sampler may draw: the degree class narrowed by the
/// construction rules (clone-target null samples are non-clone pairs;
/// non-clone-target medium samples reuse a null-sample snippet with a
/// partner outside that question).
pub fn oracle_eligible(corpus: &Corpus, target: &CodePair, degree: Degree, anchor: Option<&CodePair>) -> BTreeSet<CodePair> {
    all_pairs(corpus)
        .into_iter()
        .filter(|c| c != target && oracle_degree(target, c) == degree)
        .filter(|c| match (target.ground_truth(), degree) {
            (Label::Clone, Degree::Null) => c.ground_truth() == Label::NonClone,
            (Label::NonClone, Degree::Medium) => {
                let anchor = anchor.unwrap();
                let aq = &anchor.a.question_id;
                [(&c.a, &c.b), (&c.b, &c.a)]
                    .iter()
                    .any(|(x, y)| anchor.contains(&x.id) && &y.question_id != aq)
            }
            _ => true,
        })
        .collect()
}

/// Targets whose size-8 neighborhood is feasible in the fixture: clone
/// targets need a question with at least four snippets.
pub fn feasible_targets(corpus: &Corpus) -> Vec<CodePair> {
    all_pairs(corpus)
        .into_iter()
        .filter(|p| p.ground_truth() == Label::NonClone || corpus.question(&p.a.question_id).unwrap().len() >= 4)
        .collect()
}

/// Mismatches between the sampler and the reference, over every target,
/// degree, and (for non-clone medium) every possible null anchor.
pub fn check_oracle_equivalence(corpus: &Corpus) -> usize {
    let mut mismatches = 0;
    for target in all_pairs(corpus) {
        for c in all_pairs(corpus).iter().filter(|c| **c != target) {
            mismatches += (classify_degree(&target, c).unwrap() != oracle_degree(&target, c)) as usize;
        }
        for degree in [Degree::High, Degree::Medium, Degree::Null] {
            let anchors: Vec<Option<CodePair>> = if target.ground_truth() == Label::NonClone && degree == Degree::Medium {
                oracle_eligible(corpus, &target, Degree::Null, None).into_iter().map(Some).collect()
            } else {
                vec![None]
            };
            for anchor in anchors {
                let got: BTreeSet<_> = eligible_candidates(corpus, &target, degree, anchor.as_ref())
                    .unwrap()
                    .into_iter()
                    .collect();
                let want = oracle_eligible(corpus, &target, degree, anchor.as_ref());
                mismatches += got.symmetric_difference(&want).count();
            }
        }
    }
    mismatches
}

/// Two-rater kappa written out from marginal counts.
pub fn oracle_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> f64 {
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ma: std::collections::BTreeMap<T, f64> = std::collections::BTreeMap::new();
    let mut mb: std::collections::BTreeMap<T, f64> = std::collections::BTreeMap::new();
    for x in a {
        *ma.entry(x.clone()).or_default() += 1.0;
    }
    for y in b {
        *mb.entry(y.clone()).or_default() += 1.0;
    }
    let chance: f64 = ma.iter().map(|(k, ca)| ca * mb.get(k).copied().unwrap_or(0.0)).sum::<f64>() / (n * n);
    if chance == 1.0 {
        1.0
    } else {
        (agree - chance) / (1.0 - chance)
    }
}

/// Recount of one table cell straight from the raw results: overall, clone,
/// non-clone and code-line (hits, total).
pub fn recount_cell(results: &[ValidationResult], mode: TemperatureMode, size: KlnSize) -> [(usize, usize); 4] {
    let in_cell: Vec<&ValidationResult> = results
        .iter()
        .filter(|r| r.temperature_mode == mode && r.size == size)
        .collect();
    let count = |f: &dyn Fn(&&ValidationResult) -> bool| {
        let sel: Vec<_> = in_cell.iter().filter(|r| f(r)).collect();
        (sel.iter().filter(|r| r.verdict_correct).count(), sel.len())
    };
    let lines: Vec<&LineMatch> = in_cell.iter().flat_map(|r| r.lines_a.iter().chain(r.lines_b.iter())).collect();
    [
        count(&|_| true),
        count(&|r| r.ground_truth == Label::Clone),
        count(&|r| r.ground_truth == Label::NonClone),
        (lines.iter().filter(|m| m.matched).count(), lines.len()),
    ]
}

/// Cells where the aggregated table disagrees with the recount.
pub fn table_recount_diffs(results: &[ValidationResult]) -> Vec<String> {
    let (table, _) = aggregate(results, None, DEFAULT_BUCKET_WIDTH).unwrap();
    let mut diffs = Vec::new();
    for mode in [TemperatureMode::Default, TemperatureMode::Zero] {
        for size in [KlnSize::Four, KlnSize::Eight] {
            let want = recount_cell(results, mode, size);
            let got = match table.cells.get(&CellKey { temperature_mode: mode, size }) {
                Some(cell) => [cell.explanation, cell.clone_pairs, cell.non_clone_pairs, cell.code_lines]
                    .map(|r| (r.hits, r.total)),
                None => [(0, 0); 4],
            };
            if got != want {
                diffs.push(format!("{mode}/{size}: table {got:?}, recount {want:?}"));
            }
        }
    }
    diffs
}
